// tokuq: command-line front end for scoring, evaluation, ablation and
// synthetic corpora. Run `tokuq <subcommand> --help` for flags.

#include <tokuq/commands.hpp>
#include <tokuq/selftest.hpp>

#include "CLI11.hpp"

#include <cstdio>
#include <iostream>
#include <memory>
#include <optional>

using namespace tokuq;

namespace {

struct PerturbationFlags {
    PerturbationConfig cfg;
    std::vector<std::string> metrics;
    std::size_t workers = 1;

    void attach(CLI::App* app, bool with_metrics = true) {
        app->add_option("--seed", cfg.seed, "global seed for noise streams")->capture_default_str();
        app->add_option("--sigma", cfg.sigma, "std of random embedding noise")->capture_default_str();
        app->add_option("--num-samples", cfg.num_samples, "noise samples per case")->capture_default_str();
        app->add_option("--alpha", cfg.alpha, "adversarial step size")->capture_default_str();
        app->add_flag("--normalize-gradient", cfg.normalize_gradient, "adv_l2 steps along g / |g|");
        app->add_flag("--noise-response-only", cfg.noise_response_only,
                      "leave query rows unperturbed in rand_pert");
        app->add_option("--workers", workers, "parallel workers")->capture_default_str();
        if (with_metrics) {
            app->add_option("--metrics", metrics,
                            "nll entropy rand_pert adv_l2_pert adv_linf_pert rand_pert_log")
                ->delimiter(',');
        }
    }

    std::vector<Metric> resolved_metrics() const {
        if (metrics.empty()) return default_metrics();
        std::vector<Metric> out;
        for (const auto& name : metrics) {
            auto m = parse_metric(name);
            if (!m) throw Error(ErrorCode::invalid_argument, "unknown metric '" + name + "'");
            out.push_back(*m);
        }
        return out;
    }
};

struct BackendFlags {
    std::string model_path;
    std::string trace_path;
    std::optional<std::size_t> vocab_size;

    void attach(CLI::App* app) {
        app->add_option("--model", model_path, "reference-model parameter file");
        app->add_option("--trace", trace_path, "trace file (nll/entropy only)");
        app->add_option("--vocab-size", vocab_size, "vocabulary size for trace backends");
    }

    // Vocabulary size for trace backends defaults to max id + 1 across cases.
    std::unique_ptr<Backend> make(std::span<const ReasoningCase> cases) const {
        if (!model_path.empty() && !trace_path.empty()) {
            throw Error(ErrorCode::invalid_argument, "pass either --model or --trace, not both");
        }
        if (!model_path.empty()) return std::make_unique<ReferenceModel>(param_file::load(model_path));
        if (!trace_path.empty()) {
            std::size_t V = 1;
            for (const auto& c : cases) {
                for (TokenId id : c.tokens.ids) V = std::max<std::size_t>(V, id + 1);
            }
            return std::make_unique<TraceBackend>(vocab_size.value_or(V), load_traces(trace_path));
        }
        throw Error(ErrorCode::invalid_argument, "a backend is required: --model or --trace");
    }
};

std::vector<KSpec> parse_kspecs(const std::vector<std::string>& texts) {
    std::vector<KSpec> out;
    for (const auto& t : texts) out.push_back(parse_kspec(t));
    return out.empty() ? default_kspecs() : out;
}

void emit(const std::string& out_path, const std::vector<json>& records) {
    if (out_path.empty() || out_path == "-") {
        for (const auto& r : records) std::cout << r.dump() << '\n';
    } else {
        write_json_lines(out_path, records);
    }
}

std::vector<ReasoningCase> read_cases(const std::string& path, bool skip_invalid,
                                      std::optional<std::size_t> vocab_size = std::nullopt) {
    CaseLoadOptions opts;
    opts.skip_invalid = skip_invalid;
    opts.vocab_size = vocab_size;
    auto loaded = load_case_records(path, opts);
    for (const auto& p : loaded.problems) std::cerr << "skipped " << p << '\n';
    std::vector<ReasoningCase> out;
    for (auto& r : loaded.records) out.push_back(std::move(r.value));
    return out;
}

const ReasoningCase& find_case(std::span<const ReasoningCase> cases, const std::string& id) {
    for (const auto& c : cases) {
        if (c.case_id == id) return c;
    }
    throw Error(ErrorCode::invalid_argument, "unknown case_id '" + id + "'");
}

json defaults_json() {
    const PerturbationConfig p;
    const AblationGrid g;
    const TinyTransformerConfig m;
    const SynthCorpusConfig s;
    json metrics = json::array(), ks = json::array(), grid_metrics = json::array();
    for (Metric x : default_metrics()) metrics.push_back(to_string(x));
    for (const auto& k : default_kspecs()) ks.push_back(k.label());
    for (Metric x : g.metrics) grid_metrics.push_back(to_string(x));
    return {{"perturbation", to_json(p)},
            {"metrics", metrics},
            {"k_specs", ks},
            {"ablation",
             {{"sigma_values", g.sigma_values},
              {"num_samples_values", g.num_samples_values},
              {"alpha_values", g.alpha_values},
              {"metrics", grid_metrics}}},
            {"model",
             {{"vocab_size", m.vocab_size},
              {"dim", m.dim},
              {"num_layers", m.num_layers},
              {"num_heads", m.num_heads},
              {"ffn_dim", m.ffn_dim},
              {"max_positions", m.max_positions},
              {"init_seed", m.init_seed},
              {"init_scale", m.init_scale}}},
            {"synth",
             {{"num_cases", s.num_cases},
              {"prompt_len", s.prompt_len},
              {"response_len", s.response_len},
              {"corruption_fraction", s.corruption_fraction},
              {"sentence_len", s.sentence_len},
              {"strategy", s.strategy == DecodeStrategy::greedy ? "greedy" : "sample"},
              {"temperature", s.temperature},
              {"site", s.site == CorruptionSite::uniform ? "uniform" : "entropy_weighted"},
              {"seed", s.seed}}}};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"token-level uncertainty scoring and evaluation"};
    app.require_subcommand(1);

    // config
    auto* config_cmd = app.add_subcommand("config", "print default configuration as JSON");

    // score
    auto* score_cmd = app.add_subcommand("score", "score cases with one or more metrics");
    std::string cases_path, out_path, scores_path;
    bool skip_invalid = false;
    PerturbationFlags pert;
    BackendFlags backend_flags;
    score_cmd->add_option("--cases", cases_path, "case file")->required();
    score_cmd->add_option("--out", out_path, "score file (stdout if omitted)");
    score_cmd->add_flag("--skip-invalid", skip_invalid, "skip invalid case records");
    pert.attach(score_cmd);
    backend_flags.attach(score_cmd);

    // eval-detect
    auto* detect_cmd = app.add_subcommand("eval-detect", "top-k first-wrong-step detection rates");
    std::vector<std::string> k_texts;
    bool include_correct = false;
    detect_cmd->add_option("--scores", scores_path, "score file")->required();
    detect_cmd->add_option("--cases", cases_path, "case file")->required();
    detect_cmd->add_option("--k-specs", k_texts, "e.g. 3,5,1%")->delimiter(',');
    detect_cmd->add_flag("--include-correct", include_correct, "also evaluate correct-answer cases");
    detect_cmd->add_option("--out", out_path, "report records (JSON lines)");

    // eval-correct
    auto* correct_cmd = app.add_subcommand("eval-correct", "response-level AUROC / AP per metric");
    correct_cmd->add_option("--scores", scores_path, "score file")->required();
    correct_cmd->add_option("--cases", cases_path, "case file")->required();
    correct_cmd->add_option("--out", out_path, "report records (JSON lines)");

    // eval-sentence
    auto* sentence_cmd =
        app.add_subcommand("eval-sentence", "overlap of most uncertain sentence with the wrong one");
    sentence_cmd->add_option("--scores", scores_path, "score file")->required();
    sentence_cmd->add_option("--cases", cases_path, "case file")->required();
    sentence_cmd->add_flag("--include-correct", include_correct, "also evaluate correct-answer cases");

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "hyperparameter sweep of detection rates");
    AblationGrid grid;
    PerturbationFlags ablate_pert;
    BackendFlags ablate_backend;
    ablate_cmd->add_option("--cases", cases_path, "case file")->required();
    ablate_cmd->add_option("--sigmas", grid.sigma_values, "sigma axis")->delimiter(',');
    ablate_cmd->add_option("--samples", grid.num_samples_values, "num_samples axis")->delimiter(',');
    ablate_cmd->add_option("--alphas", grid.alpha_values, "alpha axis")->delimiter(',');
    ablate_cmd->add_option("--k-specs", k_texts, "e.g. 3,5,1%")->delimiter(',');
    ablate_cmd->add_flag("--include-correct", include_correct, "also evaluate correct-answer cases");
    ablate_cmd->add_option("--out", out_path, "ablation rows (JSON lines)");
    ablate_pert.attach(ablate_cmd);
    ablate_backend.attach(ablate_cmd);

    // timing
    auto* timing_cmd = app.add_subcommand("timing", "per-metric wall-clock summary");
    timing_cmd->add_option("--scores", scores_path, "score file")->required();

    // plot-data
    auto* plot_cmd = app.add_subcommand("plot-data", "min-max normalized series for one case");
    std::string case_id, vocab_path;
    plot_cmd->add_option("--scores", scores_path, "score file")->required();
    plot_cmd->add_option("--cases", cases_path, "case file")->required();
    plot_cmd->add_option("--case-id", case_id, "case to export")->required();
    plot_cmd->add_option("--vocab", vocab_path, "display strings, one JSON string per line");
    plot_cmd->add_option("--out", out_path, "rows (JSON lines)");

    // synth
    auto* synth_cmd = app.add_subcommand("synth", "generate a corrupted synthetic corpus");
    TinyTransformerConfig model_cfg;
    SynthCorpusConfig synth_cfg;
    std::string model_out, strategy = "greedy", site = "entropy_weighted";
    synth_cmd->add_option("--out-cases", cases_path, "case file to write")->required();
    synth_cmd->add_option("--out-model", model_out, "parameter file to write")->required();
    synth_cmd->add_option("--vocab-size", model_cfg.vocab_size)->capture_default_str();
    synth_cmd->add_option("--dim", model_cfg.dim)->capture_default_str();
    synth_cmd->add_option("--layers", model_cfg.num_layers)->capture_default_str();
    synth_cmd->add_option("--heads", model_cfg.num_heads)->capture_default_str();
    synth_cmd->add_option("--ffn-dim", model_cfg.ffn_dim)->capture_default_str();
    synth_cmd->add_option("--max-positions", model_cfg.max_positions)->capture_default_str();
    synth_cmd->add_option("--init-seed", model_cfg.init_seed)->capture_default_str();
    synth_cmd->add_option("--init-scale", model_cfg.init_scale)->capture_default_str();
    synth_cmd->add_option("--num-cases", synth_cfg.num_cases)->capture_default_str();
    synth_cmd->add_option("--prompt-len", synth_cfg.prompt_len)->capture_default_str();
    synth_cmd->add_option("--response-len", synth_cfg.response_len)->capture_default_str();
    synth_cmd->add_option("--corruption-fraction", synth_cfg.corruption_fraction)->capture_default_str();
    synth_cmd->add_option("--sentence-len", synth_cfg.sentence_len)->capture_default_str();
    synth_cmd->add_option("--strategy", strategy, "greedy or sample")
        ->check(CLI::IsMember({"greedy", "sample"}))
        ->capture_default_str();
    synth_cmd->add_option("--temperature", synth_cfg.temperature)->capture_default_str();
    synth_cmd->add_option("--site", site, "uniform or entropy_weighted")
        ->check(CLI::IsMember({"uniform", "entropy_weighted"}))
        ->capture_default_str();
    synth_cmd->add_option("--seed", synth_cfg.seed)->capture_default_str();

    // consistency
    auto* consistency_cmd =
        app.add_subcommand("consistency", "exact-match sampling consistency per sentence");
    std::string samples_path;
    consistency_cmd->add_option("--samples", samples_path, "case file of sampled responses")->required();
    consistency_cmd->add_option("--cases", cases_path, "case file holding the target")->required();
    consistency_cmd->add_option("--case-id", case_id, "target case")->required();

    // selftest
    auto* selftest_cmd = app.add_subcommand("selftest", "gradient, causality and oracle checks");

    CLI11_PARSE(app, argc, argv);

    try {
        if (config_cmd->parsed()) {
            std::cout << defaults_json().dump(2) << '\n';
        } else if (score_cmd->parsed()) {
            const auto cases = read_cases(cases_path, skip_invalid);
            const auto backend = backend_flags.make(cases);
            ScoreOptions opts{pert.resolved_metrics(), pert.cfg, pert.workers};
            const auto scores = score_cases(*backend, cases, opts);
            std::vector<json> lines;
            for (const auto& s : scores) lines.push_back(to_json(s));
            emit(out_path, lines);
        } else if (detect_cmd->parsed()) {
            const auto scores = load_scores(scores_path);
            const auto cases = read_cases(cases_path, false);
            DetectOptions opts{parse_kspecs(k_texts), include_correct};
            const auto report = evaluate_detection(scores, cases, opts);
            std::cout << format_rate_table(report.rates);
            std::cout << "cases: unannotated " << report.unannotated << ", excluded (correct) "
                      << report.excluded_correct << ", join failures " << report.join_failures.size()
                      << '\n';
            for (const auto& f : report.join_failures) std::cerr << "join failure: " << f << '\n';
            if (!out_path.empty()) write_json_lines(out_path, detection_report_records(report));
        } else if (correct_cmd->parsed()) {
            const auto scores = load_scores(scores_path);
            const auto cases = read_cases(cases_path, false);
            std::vector<json> lines;
            std::printf("%-16s %8s %8s %6s %6s\n", "metric", "AUROC", "AP", "pos", "neg");
            for (const auto& row : evaluate_correctness(scores, cases)) {
                const auto& r = row.report;
                std::printf("%-16s %8.4f %8.4f %6zu %6zu\n", std::string(to_string(row.metric)).c_str(),
                            r.auroc, r.average_precision, r.n_positive, r.n_negative);
                lines.push_back({{"format_version", kFormatVersion},
                                 {"kind", "correctness"},
                                 {"metric", to_string(row.metric)},
                                 {"auroc", r.auroc},
                                 {"average_precision", r.average_precision},
                                 {"n_positive", r.n_positive},
                                 {"n_negative", r.n_negative}});
            }
            if (!out_path.empty()) write_json_lines(out_path, lines);
        } else if (sentence_cmd->parsed()) {
            const auto scores = load_scores(scores_path);
            const auto cases = read_cases(cases_path, false);
            for (const auto& row : evaluate_sentence_overlap(scores, cases, include_correct)) {
                std::printf("%-16s %8.4f  (%zu cases)\n", std::string(to_string(row.metric)).c_str(),
                            row.rate, row.n_cases);
            }
        } else if (ablate_cmd->parsed()) {
            const auto cases = read_cases(cases_path, false);
            const auto backend = ablate_backend.make(cases);
            grid.metrics = ablate_pert.resolved_metrics();
            DetectOptions detect{parse_kspecs(k_texts), include_correct};
            const auto rows = ablate(*backend, cases, grid, ablate_pert.cfg, detect, ablate_pert.workers);
            std::vector<json> lines;
            for (const auto& r : rows) {
                lines.push_back(to_json(r));
                if (!r.error.empty()) std::cerr << "grid point failed: " << r.error << '\n';
            }
            emit(out_path, lines);
        } else if (timing_cmd->parsed()) {
            const auto scores = load_scores(scores_path);
            std::printf("%-16s %12s %12s %12s %12s %6s\n", "metric", "mean_s", "min_s", "max_s", "total_s",
                        "cases");
            for (const auto& r : timing_report(scores)) {
                std::printf("%-16s %12.6f %12.6f %12.6f %12.6f %6zu\n",
                            std::string(to_string(r.metric)).c_str(), r.mean_s, r.min_s, r.max_s,
                            r.total_s, r.count);
            }
        } else if (plot_cmd->parsed()) {
            const auto scores = load_scores(scores_path);
            const auto cases = read_cases(cases_path, false);
            const Vocabulary vocab = vocab_path.empty() ? Vocabulary{} : load_vocabulary(vocab_path);
            std::vector<json> lines;
            for (const auto& r : plot_data(scores, find_case(cases, case_id), vocab)) {
                lines.push_back({{"format_version", kFormatVersion},
                                 {"case_id", case_id},
                                 {"metric", to_string(r.metric)},
                                 {"token_index", r.token_index},
                                 {"display", r.display},
                                 {"value", r.value}});
            }
            emit(out_path, lines);
        } else if (synth_cmd->parsed()) {
            synth_cfg.strategy = strategy == "sample" ? DecodeStrategy::sample : DecodeStrategy::greedy;
            synth_cfg.site = site == "uniform" ? CorruptionSite::uniform : CorruptionSite::entropy_weighted;
            const auto model = init_reference_model(model_cfg);
            const auto cases = synth_corpus(model, synth_cfg);
            save_cases(cases_path, cases);
            param_file::save(model_out, model);
            std::size_t corrupted = 0;
            for (const auto& c : cases) corrupted += c.annotation ? 1 : 0;
            std::cout << "wrote " << cases.size() << " cases (" << corrupted << " corrupted) to "
                      << cases_path << ", model to " << model_out << '\n';
        } else if (consistency_cmd->parsed()) {
            const auto cases = read_cases(cases_path, false);
            const auto samples_cases = read_cases(samples_path, false);
            std::vector<std::vector<TokenId>> samples;
            for (const auto& s : samples_cases) {
                const auto r = s.tokens.response();
                samples.emplace_back(r.begin(), r.end());
            }
            const auto rep = consistency_stub(samples, find_case(cases, case_id));
            json j = {{"format_version", kFormatVersion},
                      {"case_id", case_id},
                      {"method", rep.method},
                      {"fractions", rep.fractions},
                      {"least_consistent", rep.least_consistent}};
            std::cout << j.dump() << '\n';
        } else if (selftest_cmd->parsed()) {
            bool ok = true;
            for (const auto& r : selftest::run_all()) {
                std::printf("%s  %-40s %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
                ok = ok && r.passed;
            }
            return ok ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
