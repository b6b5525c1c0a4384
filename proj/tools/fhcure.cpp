// fhcure: finite-horizon mixture cure modeling from the command line.
//
// Subcommands: fit, fit-conventional, simulate, replicate, sweep, evaluate,
// calibrate. Results are written as JSON documents with the stable top-level
// shape {command, config, estimates, intervals, diagnostics, seed}; tabular
// outputs (study summaries, sweeps, KM curves) are CSV. Exit codes: 0 ok,
// 1 usage, 2 data problem, 3 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fhcure/conventional.hpp"
#include "fhcure/empirical_bayes.hpp"
#include "fhcure/evaluate.hpp"
#include "fhcure/io.hpp"
#include "fhcure/simulate.hpp"

using json = nlohmann::ordered_json;
using namespace fhcure;

namespace {

json to_json(const Eigen::VectorXd& v) {
    json arr = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
    return arr;
}

Eigen::VectorXd vector_from_json(const json& arr) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(arr.size()));
    for (std::size_t i = 0; i < arr.size(); ++i) v[static_cast<Eigen::Index>(i)] = arr[i];
    return v;
}

void write_json(const json& doc, const std::string& path) {
    if (path.empty() || path == "-") {
        std::cout << doc.dump(2) << "\n";
        return;
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << doc.dump(2) << "\n";
}

std::uint64_t resolve_seed(std::optional<std::uint64_t> seed_flag) {
    if (seed_flag) return *seed_flag;
    std::random_device rd;
    const std::uint64_t seed =
        (static_cast<std::uint64_t>(rd()) << 32) ^ static_cast<std::uint64_t>(rd());
    std::cerr << "note: no --seed given; using entropy seed " << seed << "\n";
    return seed;
}

/// Schema flags shared by the commands that read CSV data.
struct SchemaOptions {
    std::string input;
    std::string time_col = "time";
    std::string event_col = "event";
    std::vector<std::string> numeric;
    std::vector<std::string> categorical;

    void attach(CLI::App* cmd) {
        cmd->add_option("--input", input, "input CSV file")->required();
        cmd->add_option("--time-col", time_col, "name of the observed-time column");
        cmd->add_option("--event-col", event_col, "name of the 0/1 event column");
        cmd->add_option("--numeric", numeric, "numeric feature columns")->delimiter(',');
        cmd->add_option("--categorical", categorical, "categorical feature columns")
            ->delimiter(',');
    }

    IngestSchema schema() const {
        IngestSchema s{time_col, event_col, {}};
        for (const auto& n : numeric) s.features.emplace_back(n, FeatureKind::Numeric);
        for (const auto& n : categorical) s.features.emplace_back(n, FeatureKind::Categorical);
        return s;
    }

    json to_config() const {
        return json{{"input", input},
                    {"time_col", time_col},
                    {"event_col", event_col},
                    {"numeric", numeric},
                    {"categorical", categorical}};
    }
};

json encoder_to_json(const DatasetEncoder& enc) {
    json arr = json::array();
    for (const auto& e : enc.encoders) {
        arr.push_back({{"column", e.column}, {"reference", e.reference}, {"levels", e.levels}});
    }
    return arr;
}

DatasetEncoder encoder_from_json(const IngestSchema& schema, const json& arr) {
    DatasetEncoder enc;
    enc.schema = schema;
    for (const auto& e : arr) {
        CategoricalEncoder ce;
        ce.column = e.at("column");
        ce.reference = e.at("reference");
        ce.levels = e.at("levels").get<std::vector<std::string>>();
        enc.encoders.push_back(std::move(ce));
    }
    return enc;
}

struct LoadedFit {
    FiniteHorizonParams params;
    IngestSchema schema;
    DatasetEncoder encoder;
    std::optional<double> split_fraction;
    std::uint64_t split_seed = 0;
};

LoadedFit load_fit_document(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open fit document '" + path + "'");
    json doc = json::parse(in);
    const json& est = doc.at("estimates");
    const json& cfg = doc.at("config");

    KnotVector kv;
    kv.c = est.at("c");
    kv.knots = est.at("knots").get<std::vector<double>>();

    LoadedFit out;
    out.params = FiniteHorizonParams{vector_from_json(est.at("b")),
                                     vector_from_json(est.at("beta")),
                                     vector_from_json(est.at("alpha")), NormalizedBasis(kv)};
    SchemaOptions so;
    so.time_col = cfg.at("time_col");
    so.event_col = cfg.at("event_col");
    so.numeric = cfg.at("numeric").get<std::vector<std::string>>();
    so.categorical = cfg.at("categorical").get<std::vector<std::string>>();
    out.schema = so.schema();
    out.encoder = encoder_from_json(out.schema, cfg.at("encoders"));
    if (cfg.contains("split") && !cfg.at("split").is_null()) {
        out.split_fraction = cfg.at("split").at("fraction").get<double>();
        out.split_seed = cfg.at("split").at("seed").get<std::uint64_t>();
    }
    return out;
}

json intervals_to_json(const std::vector<std::string>& names,
                       const std::vector<std::pair<double, double>>& iv, double level) {
    json low = json::array(), high = json::array();
    for (const auto& [lo, hi] : iv) {
        low.push_back(lo);
        high.push_back(hi);
    }
    return json{{"level", level}, {"names", names}, {"low", low}, {"high", high}};
}

std::vector<std::string> coefficient_names(const std::vector<std::string>& features) {
    std::vector<std::string> names;
    names.push_back("b:intercept");
    for (const auto& f : features) names.push_back("b:" + f);
    for (const auto& f : features) names.push_back("beta:" + f);
    return names;
}

void write_summary_csv(const StudySummary& summary, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << "param,true,bias,sd,cp,width\n";
    for (const auto& p : summary.params) {
        out << p.name << "," << format_double(p.truth) << "," << format_double(p.bias) << ","
            << (p.sd ? format_double(*p.sd) : "") << "," << format_double(p.coverage) << ","
            << format_double(p.mean_width) << "\n";
    }
}

// ---------------------------------------------------------------------------
// fit

struct FitOptions {
    SchemaOptions schema;
    double c = 0.0;
    std::size_t K = 7;
    std::optional<double> lambda;
    bool empirical_bayes = false;
    std::optional<double> split;
    std::optional<std::uint64_t> seed;
    double level = 0.95;
    std::string out;
};

int run_fit(const FitOptions& opt) {
    if (!opt.empirical_bayes && !opt.lambda) {
        throw std::invalid_argument("fit: choose --lambda <value> or --empirical-bayes");
    }
    const std::uint64_t seed = resolve_seed(opt.seed);
    const CsvTable table = read_csv(opt.schema.input);
    if (table.rows.empty()) throw DataError("no data rows in '" + opt.schema.input + "'");

    std::vector<std::size_t> train_rows(table.rows.size());
    std::iota(train_rows.begin(), train_rows.end(), std::size_t{0});
    if (opt.split) {
        train_rows = split_train_test(table.rows.size(), *opt.split, seed).first;
    }
    std::vector<std::string> warnings;
    const DatasetEncoder encoder = fit_encoder(table, opt.schema.schema(), train_rows, &warnings);
    const Dataset train = apply_encoder(table, encoder, train_rows, &warnings);
    for (const Eigen::Index j : train.constant_columns()) {
        warnings.push_back("feature '" + train.feature_names[static_cast<std::size_t>(j)] +
                           "' is constant on the training rows");
    }
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";

    FitConfig fit_cfg;
    if (opt.lambda) fit_cfg.lambda = *opt.lambda;
    FitResult fit;
    json eb_diag;
    if (opt.empirical_bayes) {
        auto [f, state] = fit_empirical_bayes(train, opt.c, opt.K, fit_cfg);
        fit = f;
        eb_diag = json{{"lambda_hat", state.lambda_hat},
                       {"log_marginal", state.log_marginal},
                       {"outer_iterations", state.outer_iterations},
                       {"converged", state.converged}};
    } else {
        fit = fit_map(train, opt.c, opt.K, fit_cfg);
    }

    const PrecisionMatrix prec = precision_matrix(fit.params, train, fit.lambda);
    const Eigen::VectorXd theta = detail::pack_params(fit.params);
    const auto intervals = credible_intervals(prec, theta, opt.level, !prec.positive_definite);

    json doc;
    doc["command"] = "fit";
    doc["config"] = opt.schema.to_config();
    doc["config"]["c"] = opt.c;
    doc["config"]["K"] = opt.K;
    doc["config"]["lambda_mode"] = opt.empirical_bayes ? "empirical-bayes" : "fixed";
    doc["config"]["encoders"] = encoder_to_json(encoder);
    doc["config"]["split"] =
        opt.split ? json{{"fraction", *opt.split}, {"seed", seed}} : json(nullptr);
    doc["estimates"] = {{"b", to_json(fit.params.b)},
                        {"beta", to_json(fit.params.beta)},
                        {"alpha", to_json(fit.params.alpha)},
                        {"lambda", fit.lambda},
                        {"c", fit.params.c()},
                        {"K", fit.params.K()},
                        {"knots", fit.params.basis.knot_vector().knots},
                        {"feature_names", train.feature_names}};
    doc["intervals"] =
        intervals_to_json(coefficient_names(train.feature_names), intervals, opt.level);
    doc["diagnostics"] = {{"converged", fit.converged},
                          {"em_iterations", fit.iterations},
                          {"log_posterior", fit.log_posterior_trace.back()},
                          {"events_beyond_horizon", fit.diagnostics.events_beyond_horizon},
                          {"rows_below_horizon", fit.diagnostics.rows_below_horizon},
                          {"n_train", train.n()},
                          {"precision_positive_definite", prec.positive_definite},
                          {"warnings", warnings}};
    if (!eb_diag.is_null()) doc["diagnostics"]["empirical_bayes"] = eb_diag;
    doc["seed"] = seed;
    write_json(doc, opt.out);
    return 0;
}

// ---------------------------------------------------------------------------
// fit-conventional

struct ConvOptions {
    SchemaOptions schema;
    std::optional<double> split;
    std::optional<std::uint64_t> seed;
    std::string out;
};

int run_fit_conventional(const ConvOptions& opt) {
    const std::uint64_t seed = resolve_seed(opt.seed);
    const CsvTable table = read_csv(opt.schema.input);
    if (table.rows.empty()) throw DataError("no data rows in '" + opt.schema.input + "'");
    std::vector<std::size_t> train_rows(table.rows.size());
    std::iota(train_rows.begin(), train_rows.end(), std::size_t{0});
    if (opt.split) train_rows = split_train_test(table.rows.size(), *opt.split, seed).first;
    std::vector<std::string> warnings;
    const DatasetEncoder encoder = fit_encoder(table, opt.schema.schema(), train_rows, &warnings);
    const Dataset train = apply_encoder(table, encoder, train_rows, &warnings);

    const ConventionalFit fit = fit_conventional(train);

    json doc;
    doc["command"] = "fit-conventional";
    doc["config"] = opt.schema.to_config();
    doc["config"]["encoders"] = encoder_to_json(encoder);
    doc["config"]["split"] =
        opt.split ? json{{"fraction", *opt.split}, {"seed", seed}} : json(nullptr);
    doc["estimates"] = {{"b", to_json(fit.b)},
                        {"beta", to_json(fit.beta)},
                        {"baseline_times", fit.baseline_times},
                        {"baseline_survival", fit.baseline_survival},
                        {"last_event_time", fit.last_event_time},
                        {"feature_names", train.feature_names}};
    doc["intervals"] = json(nullptr);
    doc["diagnostics"] = {{"converged", fit.converged},
                          {"em_iterations", fit.iterations},
                          {"log_likelihood", fit.log_likelihood_trace.back()},
                          {"incidence_separation", fit.incidence_separation},
                          {"warnings", warnings}};
    doc["seed"] = seed;
    write_json(doc, opt.out);
    return 0;
}

ConventionalFit conventional_from_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open fit document '" + path + "'");
    json doc = json::parse(in);
    const json& est = doc.at("estimates");
    ConventionalFit fit;
    fit.b = vector_from_json(est.at("b"));
    fit.beta = vector_from_json(est.at("beta"));
    fit.baseline_times = est.at("baseline_times").get<std::vector<double>>();
    fit.baseline_survival = est.at("baseline_survival").get<std::vector<double>>();
    fit.last_event_time = est.at("last_event_time");
    return fit;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateOptions {
    std::string scenario;
    int n = 1000;
    std::optional<std::uint64_t> seed;
    std::string config_path;
    std::string out;
    std::string truth_out;
};

/// Optional JSON overrides for the scenario generator constants.
void apply_scenario_overrides(const std::string& path, ScenarioAConfig* a, ScenarioBConfig* b) {
    if (path.empty()) return;
    std::ifstream in(path);
    if (!in) throw DataError("cannot open scenario config '" + path + "'");
    const json cfg = json::parse(in);
    if (a) {
        if (cfg.contains("N")) a->N = cfg.at("N");
        if (cfg.contains("c")) a->c = cfg.at("c");
        if (cfg.contains("eta")) a->eta = cfg.at("eta");
        if (cfg.contains("lambda_cens")) a->lambda_cens = cfg.at("lambda_cens");
        if (cfg.contains("lambda_after_c")) a->lambda_after_c = cfg.at("lambda_after_c");
        if (cfg.contains("seed")) a->seed = cfg.at("seed");
        if (cfg.contains("b_true")) a->b_true = vector_from_json(cfg.at("b_true"));
        if (cfg.contains("beta_true")) a->beta_true = vector_from_json(cfg.at("beta_true"));
        if (a->b_true.size() != a->beta_true.size() + 1) {
            throw DataError("scenario config: b_true must have one more entry than beta_true");
        }
    }
    if (b) {
        if (cfg.contains("n")) b->n = cfg.at("n");
        if (cfg.contains("pi_x1")) b->pi_x1 = cfg.at("pi_x1");
        if (cfg.contains("pi_x0")) b->pi_x0 = cfg.at("pi_x0");
        if (cfg.contains("rate_x1")) b->rate_x1 = cfg.at("rate_x1");
        if (cfg.contains("rate_x0")) b->rate_x0 = cfg.at("rate_x0");
        if (cfg.contains("censor_upper")) b->censor_upper = cfg.at("censor_upper");
        if (cfg.contains("seed")) b->seed = cfg.at("seed");
    }
}

int run_simulate(const SimulateOptions& opt) {
    const std::uint64_t seed = resolve_seed(opt.seed);
    json doc;
    doc["command"] = "simulate";
    doc["config"] = {{"scenario", opt.scenario}, {"N", opt.n}};
    if (!opt.config_path.empty()) doc["config"]["config_file"] = opt.config_path;
    doc["seed"] = seed;

    if (opt.scenario == "a1" || opt.scenario == "a2") {
        ScenarioAConfig cfg = opt.scenario == "a1" ? scenario_a1_config(opt.n, seed)
                                                   : scenario_a2_config(opt.n, seed);
        apply_scenario_overrides(opt.config_path, &cfg, nullptr);
        auto [data, truth] = generate_scenario_a(cfg);
        write_dataset_csv(data, opt.out);
        if (!opt.truth_out.empty()) {
            json tr;
            tr["z"] = std::vector<int>(truth.z.data(), truth.z.data() + truth.z.size());
            tr["latent_time"] = std::vector<double>(truth.latent_time.data(),
                                                    truth.latent_time.data() + truth.z.size());
            tr["censor_time"] = std::vector<double>(truth.censor_time.data(),
                                                    truth.censor_time.data() + truth.z.size());
            write_json(tr, opt.truth_out);
        }
        doc["diagnostics"] = {{"rows", data.n()}, {"c", cfg.c}};
    } else if (opt.scenario == "b") {
        ScenarioBConfig cfg;
        cfg.n = opt.n;
        cfg.seed = seed;
        apply_scenario_overrides(opt.config_path, nullptr, &cfg);
        const Dataset data = generate_scenario_b(cfg);
        write_dataset_csv(data, opt.out);
        doc["diagnostics"] = {{"rows", data.n()}};
    } else {
        throw std::invalid_argument("simulate: unknown scenario '" + opt.scenario +
                                    "' (expected a1, a2 or b)");
    }
    std::cerr << "wrote " << opt.out << "\n";
    write_json(doc, "");
    return 0;
}

// ---------------------------------------------------------------------------
// replicate

struct ReplicateOptions {
    std::string scenario = "a1";
    int M = 100;
    int N = 1000;
    std::size_t K = 7;
    std::optional<double> lambda;
    bool empirical_bayes = false;
    std::optional<std::uint64_t> seed;
    int jobs = 1;
    std::string out;
    std::string json_out;
    std::string rmise_out;
};

int run_replicate(const ReplicateOptions& opt) {
    const std::uint64_t seed = resolve_seed(opt.seed);
    ScenarioAConfig cfg;
    if (opt.scenario == "a1") cfg = scenario_a1_config(opt.N, seed);
    else if (opt.scenario == "a2") cfg = scenario_a2_config(opt.N, seed);
    else throw std::invalid_argument("replicate: unknown scenario '" + opt.scenario + "'");

    StudyRunConfig run;
    run.M = opt.M;
    run.K = opt.K;
    run.jobs = opt.jobs;
    run.use_empirical_bayes = !opt.lambda || opt.empirical_bayes;
    if (opt.lambda) run.fit.lambda = *opt.lambda;
    const StudyResult result = run_replications(cfg, run);
    write_summary_csv(result.summary, opt.out);
    if (!opt.rmise_out.empty() && result.summary.rmise) {
        std::ofstream rout(opt.rmise_out);
        if (!rout) throw DataError("cannot write '" + opt.rmise_out + "'");
        rout << "scenario,N,M,rmise\n";
        rout << opt.scenario << "," << opt.N << "," << opt.M << ","
             << format_double(*result.summary.rmise) << "\n";
    }

    json doc;
    doc["command"] = "replicate";
    doc["config"] = {{"scenario", opt.scenario},
                     {"M", opt.M},
                     {"N", opt.N},
                     {"K", opt.K},
                     {"jobs", opt.jobs},
                     {"lambda_mode", run.use_empirical_bayes ? "empirical-bayes" : "fixed"}};
    json params = json::array();
    for (const auto& p : result.summary.params) {
        params.push_back({{"param", p.name},
                          {"true", p.truth},
                          {"bias", p.bias},
                          {"sd", p.sd ? json(*p.sd) : json(nullptr)},
                          {"cp", p.coverage},
                          {"width", p.mean_width}});
    }
    doc["estimates"] = {
        {"params", params},
        {"rmise", result.summary.rmise ? json(*result.summary.rmise) : json(nullptr)}};
    doc["intervals"] = json(nullptr);
    doc["diagnostics"] = {{"replications", result.summary.replications},
                          {"failures", result.summary.failures}};
    doc["seed"] = seed;
    write_json(doc, opt.json_out);
    std::cerr << "wrote " << opt.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepOptions {
    SchemaOptions schema;
    std::vector<double> grid;
    std::size_t K = 5;
    std::optional<double> lambda;
    bool empirical_bayes = false;
    std::optional<std::uint64_t> seed;
    std::string out;
};

int run_sweep(const SweepOptions& opt) {
    const std::uint64_t seed = resolve_seed(opt.seed);
    std::vector<std::string> warnings;
    const Dataset data = ingest_csv(opt.schema.input, opt.schema.schema(), &warnings);
    std::vector<double> grid = opt.grid;
    if (grid.empty()) grid = ScenarioBConfig{}.cutoff_grid();

    StudyRunConfig run;
    run.K = opt.K;
    run.use_empirical_bayes = !opt.lambda || opt.empirical_bayes;
    if (opt.lambda) run.fit.lambda = *opt.lambda;
    const auto rows = sweep_cutoffs(data, grid, run);

    std::ofstream out(opt.out);
    if (!out) throw DataError("cannot write '" + opt.out + "'");
    out << "c,coefficient,estimate,low,high,ok\n";
    for (const auto& row : rows) {
        out << format_double(row.cutoff) << "," << row.coefficient << ","
            << format_double(row.estimate) << "," << format_double(row.low) << ","
            << format_double(row.high) << "," << (row.ok ? 1 : 0) << "\n";
    }
    std::cerr << "wrote " << opt.out << "\n";

    json doc;
    doc["command"] = "sweep";
    doc["config"] = opt.schema.to_config();
    doc["config"]["grid"] = grid;
    doc["config"]["K"] = opt.K;
    doc["estimates"] = json(nullptr);
    doc["diagnostics"] = {{"rows", rows.size()}};
    doc["seed"] = seed;
    write_json(doc, "");
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOptions {
    std::string metric;
    SchemaOptions schema;
    std::string fit_path;
    std::string conventional_path;
    std::vector<std::string> fit_paths;
    std::string scenario = "a1";
    double tau1 = 0.0;
    double tau2 = 0.0;
    bool holdout = true;
    std::string out;
};

int run_evaluate_km(const EvaluateOptions& opt) {
    if (opt.schema.input.empty()) throw std::invalid_argument("evaluate km: need --input");
    const CsvTable table = read_csv(opt.schema.input);
    const std::size_t tcol = table.column_index(opt.schema.time_col);
    const std::size_t ecol = table.column_index(opt.schema.event_col);
    std::vector<double> times;
    std::vector<int> events;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        times.push_back(parse_double(table.rows[r][tcol], r, opt.schema.time_col));
        const std::string& ev = table.rows[r][ecol];
        if (ev != "0" && ev != "1") {
            throw DataError("event value '" + ev + "' at data row " + std::to_string(r));
        }
        events.push_back(ev == "1" ? 1 : 0);
    }
    const StepSurvival km = kaplan_meier(times, events);
    std::ofstream out(opt.out);
    if (!out) throw DataError("cannot write '" + opt.out + "'");
    out << "time,survival,n_risk,n_event\n";
    for (std::size_t j = 0; j < km.times.size(); ++j) {
        out << format_double(km.times[j]) << "," << format_double(km.survival[j]) << ","
            << km.n_risk[j] << "," << km.n_event[j] << "\n";
    }
    std::cerr << "wrote " << opt.out << "\n";
    return 0;
}

int run_evaluate_rmise(const EvaluateOptions& opt) {
    if (opt.fit_paths.empty()) throw std::invalid_argument("evaluate rmise: need --fits");
    ScenarioAConfig cfg =
        opt.scenario == "a2" ? scenario_a2_config(1, 0) : scenario_a1_config(1, 0);
    std::vector<FiniteHorizonParams> params;
    params.reserve(opt.fit_paths.size());
    for (const auto& path : opt.fit_paths) params.push_back(load_fit_document(path).params);
    std::vector<std::function<double(double)>> curves;
    curves.reserve(params.size());
    for (const auto& p : params) {
        curves.emplace_back(
            [&p](double t) { return t < p.c() ? baseline_survival(p, t) : 0.0; });
    }
    const double value = rmise(curves, scenario_a_true_baseline(cfg), cfg.c);
    json doc;
    doc["command"] = "evaluate";
    doc["config"] = {{"metric", "rmise"}, {"scenario", opt.scenario}, {"fits", opt.fit_paths}};
    doc["estimates"] = {{"rmise", value}};
    write_json(doc, opt.out);
    return 0;
}

int run_evaluate_auc(const EvaluateOptions& opt) {
    if (opt.fit_path.empty()) throw std::invalid_argument("evaluate auc: need --fit");
    if (opt.schema.input.empty()) throw std::invalid_argument("evaluate auc: need --input");
    const LoadedFit fit = load_fit_document(opt.fit_path);
    const CsvTable table = read_csv(opt.schema.input);

    std::vector<std::size_t> train_rows(table.rows.size());
    std::iota(train_rows.begin(), train_rows.end(), std::size_t{0});
    std::vector<std::size_t> test_rows = train_rows;
    if (fit.split_fraction && opt.holdout) {
        auto [tr, te] = split_train_test(table.rows.size(), *fit.split_fraction, fit.split_seed);
        train_rows = tr;
        test_rows = te;
    }
    const Dataset train = apply_encoder(table, fit.encoder, train_rows);
    const Dataset test = apply_encoder(table, fit.encoder, test_rows);

    const std::vector<double> train_t(train.time.data(), train.time.data() + train.n());
    const std::vector<int> train_d(train.event.data(), train.event.data() + train.n());
    const std::vector<double> test_t(test.time.data(), test.time.data() + test.n());
    const std::vector<int> test_d(test.event.data(), test.event.data() + test.n());

    const double tau2 = opt.tau2 > 0.0 ? opt.tau2 : fit.params.c();
    const auto grid = auc_time_grid(test_t, test_d, opt.tau1, tau2);

    Eigen::MatrixXd scores(static_cast<Eigen::Index>(grid.size()), test.n());
    const double t_cap = std::nextafter(fit.params.c(), 0.0);
    Eigen::VectorXd x(test.p() + 1);
    for (std::size_t k = 0; k < grid.size(); ++k) {
        const double t = std::min(grid[k], t_cap);
        for (Eigen::Index i = 0; i < test.n(); ++i) {
            x[0] = 1.0;
            x.tail(test.p()) = test.x.row(i);
            scores(static_cast<Eigen::Index>(k), i) = 1.0 - population_survival(fit.params, t, x);
        }
    }
    const auto auc = mean_cumulative_dynamic_auc(train_t, train_d, test_t, test_d, grid, scores,
                                                 opt.tau1, tau2);

    json doc;
    doc["command"] = "evaluate";
    doc["config"] = {{"metric", "auc"},  {"fit", opt.fit_path}, {"input", opt.schema.input},
                     {"tau1", opt.tau1}, {"tau2", tau2},        {"holdout", opt.holdout},
                     {"grid_size", grid.size()}};
    doc["estimates"] = {{"auc", auc ? json(*auc) : json(nullptr)}};

    if (!opt.conventional_path.empty()) {
        const ConventionalFit conv = conventional_from_json(opt.conventional_path);
        Eigen::MatrixXd cscores(static_cast<Eigen::Index>(grid.size()), test.n());
        for (std::size_t k = 0; k < grid.size(); ++k) {
            for (Eigen::Index i = 0; i < test.n(); ++i) {
                cscores(static_cast<Eigen::Index>(k), i) =
                    conventional_risk_score(conv, test.x.row(i).transpose(), grid[k]);
            }
        }
        const auto cauc = mean_cumulative_dynamic_auc(train_t, train_d, test_t, test_d, grid,
                                                      cscores, opt.tau1, tau2);
        doc["estimates"]["auc_conventional"] = cauc ? json(*cauc) : json(nullptr);
    }
    doc["diagnostics"] = {{"n_test", test.n()}, {"n_train", train.n()}};
    write_json(doc, opt.out);
    return 0;
}

// ---------------------------------------------------------------------------
// calibrate

struct CalibrateOptions {
    double target_event = 0.7;
    double target_censor = 0.3;
    int pilot_n = 100000;
    std::optional<std::uint64_t> seed;
    std::string out;
};

int run_calibrate(const CalibrateOptions& opt) {
    const std::uint64_t seed = resolve_seed(opt.seed);
    ScenarioAConfig cfg = scenario_a1_config(opt.pilot_n, seed);
    const CalibrationResult r = calibrate(opt.target_event, opt.target_censor, cfg, opt.pilot_n);
    json doc;
    doc["command"] = "calibrate";
    doc["config"] = {{"target_event_fraction", opt.target_event},
                     {"target_censor_fraction", opt.target_censor},
                     {"pilot_n", opt.pilot_n}};
    doc["estimates"] = {{"intercept", r.intercept},
                        {"lambda_cens", r.lambda_cens},
                        {"achieved_event_fraction", r.achieved_event_fraction},
                        {"achieved_censor_fraction", r.achieved_censor_fraction}};
    doc["seed"] = seed;
    write_json(doc, opt.out);
    return 0;
}

json error_object(const std::string& type, const std::string& message) {
    return json{{"error", {{"type", type}, {"message", message}}}};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"finite-horizon mixture cure modeling"};
    app.require_subcommand(1);

    FitOptions fit_opt;
    auto* fit_cmd = app.add_subcommand("fit", "fit the finite-horizon model to CSV data");
    fit_opt.schema.attach(fit_cmd);
    fit_cmd->add_option("--c", fit_opt.c, "time horizon")->required();
    fit_cmd->add_option("--K", fit_opt.K, "number of spline basis functions");
    fit_cmd->add_option("--lambda", fit_opt.lambda, "fixed penalty on the spline log-weights");
    fit_cmd->add_flag("--empirical-bayes", fit_opt.empirical_bayes,
                      "select the penalty by empirical Bayes");
    fit_cmd->add_option("--split", fit_opt.split, "train fraction; fit on the train split only");
    fit_cmd->add_option("--seed", fit_opt.seed, "seed for the split");
    fit_cmd->add_option("--level", fit_opt.level, "credible level");
    fit_cmd->add_option("--out", fit_opt.out, "output JSON path (default stdout)");

    ConvOptions conv_opt;
    auto* conv_cmd =
        app.add_subcommand("fit-conventional", "fit the infinite-horizon benchmark model");
    conv_opt.schema.attach(conv_cmd);
    conv_cmd->add_option("--split", conv_opt.split, "train fraction");
    conv_cmd->add_option("--seed", conv_opt.seed, "seed for the split");
    conv_cmd->add_option("--out", conv_opt.out, "output JSON path (default stdout)");

    SimulateOptions sim_opt;
    auto* sim_cmd = app.add_subcommand("simulate", "generate a synthetic dataset");
    sim_cmd->add_option("--scenario", sim_opt.scenario, "a1, a2 or b")->required();
    sim_cmd->add_option("--N,--n", sim_opt.n, "sample size");
    sim_cmd->add_option("--seed", sim_opt.seed, "master seed");
    sim_cmd->add_option("--config", sim_opt.config_path,
                        "JSON document overriding the generator constants");
    sim_cmd->add_option("--out", sim_opt.out, "output CSV path")->required();
    sim_cmd->add_option("--truth", sim_opt.truth_out, "also write the latent truth as JSON");

    ReplicateOptions rep_opt;
    auto* rep_cmd = app.add_subcommand("replicate", "run a Monte Carlo replication study");
    rep_cmd->add_option("--scenario", rep_opt.scenario, "a1 or a2");
    rep_cmd->add_option("--M", rep_opt.M, "number of replications");
    rep_cmd->add_option("--N", rep_opt.N, "sample size per replication");
    rep_cmd->add_option("--K", rep_opt.K, "spline basis size");
    rep_cmd->add_option("--lambda", rep_opt.lambda, "fixed penalty (default: empirical Bayes)");
    rep_cmd->add_flag("--empirical-bayes", rep_opt.empirical_bayes, "penalty by empirical Bayes");
    rep_cmd->add_option("--seed", rep_opt.seed, "master seed");
    rep_cmd->add_option("--jobs", rep_opt.jobs, "worker threads");
    rep_cmd->add_option("--out", rep_opt.out, "summary CSV path")->required();
    rep_cmd->add_option("--json", rep_opt.json_out, "summary JSON path (default stdout)");
    rep_cmd->add_option("--rmise-out", rep_opt.rmise_out, "baseline RMISE table CSV path");

    SweepOptions sweep_opt;
    auto* sweep_cmd = app.add_subcommand("sweep", "fit across a grid of horizons");
    sweep_opt.schema.attach(sweep_cmd);
    sweep_cmd->add_option("--grid", sweep_opt.grid, "horizon grid values")->delimiter(',');
    sweep_cmd->add_option("--K", sweep_opt.K, "spline basis size");
    sweep_cmd->add_option("--lambda", sweep_opt.lambda, "fixed penalty (default: empirical Bayes)");
    sweep_cmd->add_flag("--empirical-bayes", sweep_opt.empirical_bayes,
                        "penalty by empirical Bayes");
    sweep_cmd->add_option("--seed", sweep_opt.seed, "seed echoed into outputs");
    sweep_cmd->add_option("--out", sweep_opt.out, "long-format CSV path")->required();

    EvaluateOptions eval_opt;
    auto* eval_cmd = app.add_subcommand("evaluate", "km, rmise or auc metrics");
    eval_cmd->add_option("--metric", eval_opt.metric, "km | rmise | auc")->required();
    eval_cmd->add_option("--input", eval_opt.schema.input, "input CSV file");
    eval_cmd->add_option("--time-col", eval_opt.schema.time_col, "observed-time column");
    eval_cmd->add_option("--event-col", eval_opt.schema.event_col, "event column");
    eval_cmd->add_option("--fit", eval_opt.fit_path, "fit JSON (auc)");
    eval_cmd->add_option("--conventional", eval_opt.conventional_path,
                         "conventional fit JSON (auc, optional)");
    eval_cmd->add_option("--fits", eval_opt.fit_paths, "fit JSONs (rmise)")->delimiter(',');
    eval_cmd->add_option("--scenario", eval_opt.scenario, "true baseline for rmise (a1|a2)");
    eval_cmd->add_option("--tau1", eval_opt.tau1, "window start (auc)");
    eval_cmd->add_option("--tau2", eval_opt.tau2, "window end (auc, default: fitted horizon)");
    eval_cmd->add_flag("!--no-holdout", eval_opt.holdout,
                       "score the full file instead of the stored holdout split");
    eval_cmd->add_option("--out", eval_opt.out, "output path (default stdout)");

    CalibrateOptions cal_opt;
    auto* cal_cmd = app.add_subcommand("calibrate", "tune the scenario A generator constants");
    cal_cmd->add_option("--target-event", cal_opt.target_event, "event-group fraction target");
    cal_cmd->add_option("--target-censor", cal_opt.target_censor,
                        "censoring fraction target within the event group");
    cal_cmd->add_option("--pilot-n", cal_opt.pilot_n, "pilot sample size");
    cal_cmd->add_option("--seed", cal_opt.seed, "pilot seed");
    cal_cmd->add_option("--out", cal_opt.out, "output JSON path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        app.exit(e);
        return 1;
    }

    try {
        if (*fit_cmd) return run_fit(fit_opt);
        if (*conv_cmd) return run_fit_conventional(conv_opt);
        if (*sim_cmd) return run_simulate(sim_opt);
        if (*rep_cmd) return run_replicate(rep_opt);
        if (*sweep_cmd) return run_sweep(sweep_opt);
        if (*eval_cmd) {
            if (eval_opt.metric == "km") return run_evaluate_km(eval_opt);
            if (eval_opt.metric == "rmise") return run_evaluate_rmise(eval_opt);
            if (eval_opt.metric == "auc") return run_evaluate_auc(eval_opt);
            throw std::invalid_argument("evaluate: unknown metric '" + eval_opt.metric + "'");
        }
        if (*cal_cmd) return run_calibrate(cal_opt);
    } catch (const DataError& e) {
        std::cerr << error_object("data", e.what()).dump() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << error_object("config", e.what()).dump() << "\n";
        return 2;
    } catch (const std::domain_error& e) {
        std::cerr << error_object("domain", e.what()).dump() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << error_object("numeric", e.what()).dump() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << error_object("internal", e.what()).dump() << "\n";
        return 3;
    }
    return 1;
}
