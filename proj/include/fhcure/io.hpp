#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "fhcure/common.hpp"
#include "fhcure/model.hpp"
#include "fhcure/rng.hpp"

namespace fhcure {

/// Format a double with 17 significant digits, enough to round-trip exactly
/// through text.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

enum class FeatureKind { Numeric, Categorical };

struct IngestSchema {
    std::string time_column;
    std::string event_column;
    std::vector<std::pair<std::string, FeatureKind>> features;
};

/// Raw parsed CSV with string cells, header first.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column_index(const std::string& name) const {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw DataError("missing column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    }
};

inline CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    CsvTable table;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() && in.peek() == std::char_traits<char>::eof()) break;
        std::vector<std::string> cells;
        std::string cell;
        std::stringstream ss(line);
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.push_back("");
        if (first) {
            table.header = std::move(cells);
            first = false;
        } else {
            table.rows.push_back(std::move(cells));
        }
    }
    if (first) throw DataError("empty file '" + path + "'");
    return table;
}

inline double parse_double(const std::string& cell, std::size_t row, const std::string& column) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(cell, &pos);
        if (pos != cell.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw DataError("cannot parse '" + cell + "' in column '" + column + "' at data row " +
                        std::to_string(row));
    }
}

/// One-hot encoder for a single categorical column. The reference level is
/// the most frequent one in the fitting data (ties broken lexicographically)
/// and is dropped; the remaining levels become 0/1 columns in lexicographic
/// order. Unseen levels at apply time encode as all zeros.
struct CategoricalEncoder {
    std::string column;
    std::string reference;
    std::vector<std::string> levels;  ///< encoded levels, lexicographic

    std::vector<std::string> column_names() const {
        std::vector<std::string> names;
        names.reserve(levels.size());
        for (const auto& level : levels) names.push_back(column + "=" + level);
        return names;
    }
};

inline CategoricalEncoder encode_with_reference(const std::string& column,
                                                const std::vector<std::string>& values,
                                                std::vector<std::string>* warnings = nullptr) {
    if (values.empty()) throw DataError("encode_with_reference: empty column '" + column + "'");
    std::map<std::string, int> counts;
    for (const auto& v : values) ++counts[v];

    CategoricalEncoder enc;
    enc.column = column;
    enc.reference = counts.begin()->first;
    int best = counts.begin()->second;
    for (const auto& [level, count] : counts) {
        if (count > best) {  // ties keep the lexicographically first level
            best = count;
            enc.reference = level;
        }
    }
    for (const auto& [level, count] : counts) {
        if (level != enc.reference) enc.levels.push_back(level);
    }
    if (enc.levels.empty() && warnings) {
        warnings->push_back("column '" + column + "' has a single level; no dummy columns emitted");
    }
    return enc;
}

/// Fitted encoding of a feature set: numeric passthrough columns plus one
/// encoder per categorical column, fit on the training rows only.
struct DatasetEncoder {
    IngestSchema schema;
    std::vector<CategoricalEncoder> encoders;  ///< one per categorical feature, schema order

    std::vector<std::string> feature_names() const {
        std::vector<std::string> names;
        std::size_t e = 0;
        for (const auto& [name, kind] : schema.features) {
            if (kind == FeatureKind::Numeric) {
                names.push_back(name);
            } else {
                for (const auto& n : encoders[e].column_names()) names.push_back(n);
                ++e;
            }
        }
        return names;
    }
};

inline DatasetEncoder fit_encoder(const CsvTable& table, const IngestSchema& schema,
                                  const std::vector<std::size_t>& fit_rows,
                                  std::vector<std::string>* warnings = nullptr) {
    DatasetEncoder enc;
    enc.schema = schema;
    for (const auto& [name, kind] : schema.features) {
        if (kind != FeatureKind::Categorical) continue;
        const std::size_t col = table.column_index(name);
        std::vector<std::string> values;
        values.reserve(fit_rows.size());
        for (std::size_t r : fit_rows) values.push_back(table.rows[r][col]);
        enc.encoders.push_back(encode_with_reference(name, values, warnings));
    }
    return enc;
}

/// Materialize the selected rows of a parsed table into a Dataset using a
/// fitted encoder.
inline Dataset apply_encoder(const CsvTable& table, const DatasetEncoder& enc,
                             const std::vector<std::size_t>& rows,
                             std::vector<std::string>* warnings = nullptr) {
    const std::size_t time_col = table.column_index(enc.schema.time_column);
    const std::size_t event_col = table.column_index(enc.schema.event_column);

    const std::vector<std::string> names = enc.feature_names();
    Dataset data;
    data.feature_names = names;
    data.time.resize(static_cast<Eigen::Index>(rows.size()));
    data.event.resize(static_cast<Eigen::Index>(rows.size()));
    data.x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows.size()),
                                   static_cast<Eigen::Index>(names.size()));

    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto& cells = table.rows[rows[k]];
        if (cells.size() != table.header.size()) {
            throw DataError("row " + std::to_string(rows[k]) + " has " +
                            std::to_string(cells.size()) + " cells, expected " +
                            std::to_string(table.header.size()));
        }
        const auto i = static_cast<Eigen::Index>(k);
        data.time[i] = parse_double(cells[time_col], rows[k], enc.schema.time_column);
        if (!(data.time[i] >= 0.0)) {
            throw DataError("negative time at data row " + std::to_string(rows[k]));
        }
        const std::string& ev = cells[event_col];
        if (ev == "0") data.event[i] = 0;
        else if (ev == "1") data.event[i] = 1;
        else throw DataError("event value '" + ev + "' at data row " + std::to_string(rows[k]) +
                             " is not 0 or 1");

        Eigen::Index out_col = 0;
        std::size_t e = 0;
        for (const auto& [name, kind] : enc.schema.features) {
            const std::size_t col = table.column_index(name);
            if (kind == FeatureKind::Numeric) {
                data.x(i, out_col++) = parse_double(cells[col], rows[k], name);
            } else {
                const CategoricalEncoder& ce = enc.encoders[e++];
                const std::string& value = cells[col];
                bool seen = value == ce.reference;
                for (std::size_t l = 0; l < ce.levels.size(); ++l) {
                    if (ce.levels[l] == value) {
                        data.x(i, out_col + static_cast<Eigen::Index>(l)) = 1.0;
                        seen = true;
                    }
                }
                if (!seen && warnings) {
                    warnings->push_back("unseen level '" + value + "' in column '" + name +
                                        "' at data row " + std::to_string(rows[k]) +
                                        "; encoded as all zeros");
                }
                out_col += static_cast<Eigen::Index>(ce.levels.size());
            }
        }
    }
    return data;
}

/// Ingest a whole CSV file: numeric features pass through, categorical ones
/// are one-hot encoded with the most-frequent reference (fit on these rows).
inline Dataset ingest_csv(const std::string& path, const IngestSchema& schema,
                          std::vector<std::string>* warnings = nullptr) {
    const CsvTable table = read_csv(path);
    if (table.rows.empty()) throw DataError("no data rows in '" + path + "'");
    std::vector<std::size_t> all(table.rows.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const DatasetEncoder enc = fit_encoder(table, schema, all, warnings);
    return apply_encoder(table, enc, all, warnings);
}

/// Uniform random train/test split without replacement; deterministic in the
/// seed. Throws if either side would be empty.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_train_test(
    std::size_t n, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw std::invalid_argument("split_train_test: fraction must lie in (0, 1)");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream rng(seed, 0x5B117);
    for (std::size_t i = n; i > 1; --i) {  // Fisher-Yates on the stream's uniforms
        const auto j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i));
        std::swap(order[i - 1], order[std::min(j, i - 1)]);
    }
    const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    if (n_train == 0 || n_train >= n) throw DataError("split_train_test: empty partition");
    std::vector<std::size_t> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<std::size_t> test(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {train, test};
}

/// Write a dataset as CSV (time, event, then features) at full precision.
inline void write_dataset_csv(const Dataset& data, const std::string& path,
                              const std::string& time_name = "time",
                              const std::string& event_name = "event") {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << time_name << "," << event_name;
    for (const auto& name : data.feature_names) out << "," << name;
    out << "\n";
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        out << format_double(data.time[i]) << "," << data.event[i];
        for (Eigen::Index j = 0; j < data.p(); ++j) out << "," << format_double(data.x(i, j));
        out << "\n";
    }
}

}  // namespace fhcure
