#pragma once
// Line-delimited JSON records for cases, traces and scores.
//
// Every record carries "format_version". Score records keep wall-clock data in
// a separate "timing" object so the remaining payload is deterministic.

#include <tokuq/backend.hpp>
#include <tokuq/core.hpp>

#include "json.hpp"

#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace tokuq {

using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

// File form of a ReasoningCase; fields tokuq does not know are kept in extras.
struct CaseRecord {
    ReasoningCase value;
    json extras = json::object();
};

struct ScoreRecord {
    std::string case_id;
    ScoreSeries series;
    PerturbationConfig config;
    double duration_s = 0.0;
};

inline std::string_view to_string(PerturbationMode m) {
    switch (m) {
        case PerturbationMode::random: return "random";
        case PerturbationMode::adv_l2: return "adv_l2";
        case PerturbationMode::adv_linf: return "adv_linf";
    }
    return "random";
}

inline PerturbationMode parse_mode(std::string_view s) {
    if (s == "random") return PerturbationMode::random;
    if (s == "adv_l2") return PerturbationMode::adv_l2;
    if (s == "adv_linf") return PerturbationMode::adv_linf;
    throw Error(ErrorCode::parse_error, "unknown perturbation mode '" + std::string(s) + "'");
}

namespace detail {

inline const json& require_field(const json& j, const char* name) {
    auto it = j.find(name);
    if (it == j.end()) throw Error(ErrorCode::parse_error, std::string("missing field '") + name + "'");
    return *it;
}

inline void check_version(const json& j) {
    auto it = j.find("format_version");
    if (it != j.end() && it->get<int>() != kFormatVersion) {
        throw Error(ErrorCode::parse_error, "unsupported format_version " + it->dump());
    }
}

template <class Fn>
void for_each_line(const std::string& path, Fn&& fn) {
    std::ifstream f(path);
    if (!f) throw Error(ErrorCode::io_error, "cannot open " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw Error(ErrorCode::parse_error, path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        fn(j, lineno);
    }
}

inline void write_lines(const std::string& path, const std::vector<json>& records) {
    std::ofstream f(path);
    if (!f) throw Error(ErrorCode::io_error, "cannot open " + path + " for writing");
    for (const auto& r : records) f << r.dump() << '\n';
    if (!f) throw Error(ErrorCode::io_error, "write failed: " + path);
}

}  // namespace detail

// ---- cases ----

inline json to_json(const CaseRecord& rec) {
    json j = rec.extras.is_object() ? rec.extras : json::object();
    const auto& c = rec.value;
    j["format_version"] = kFormatVersion;
    j["case_id"] = c.case_id;
    j["ids"] = c.tokens.ids;
    j["query_len"] = c.tokens.query_len;
    j["response_len"] = c.tokens.response_len;
    if (c.annotation) {
        json a = {{"start", c.annotation->token_range.start}, {"end", c.annotation->token_range.end}};
        if (c.annotation->sentence_index) a["sentence_index"] = *c.annotation->sentence_index;
        if (c.annotation->source) a["source"] = *c.annotation->source;
        j["annotation"] = a;
    }
    if (c.sentence_boundaries) {
        json b = json::array();
        for (const auto& iv : *c.sentence_boundaries) b.push_back({iv.start, iv.end});
        j["sentence_boundaries"] = b;
    }
    if (c.final_answer_correct) j["final_answer_correct"] = *c.final_answer_correct;
    return j;
}

inline CaseRecord case_from_json(const json& j) {
    static const std::vector<std::string> known = {
        "format_version", "case_id",   "ids", "query_len", "response_len", "annotation",
        "sentence_boundaries", "final_answer_correct"};
    try {
        detail::check_version(j);
        CaseRecord rec;
        auto& c = rec.value;
        c.case_id = detail::require_field(j, "case_id").get<std::string>();
        c.tokens.ids = detail::require_field(j, "ids").get<std::vector<TokenId>>();
        c.tokens.query_len = detail::require_field(j, "query_len").get<std::size_t>();
        c.tokens.response_len = detail::require_field(j, "response_len").get<std::size_t>();
        if (auto it = j.find("annotation"); it != j.end() && !it->is_null()) {
            WrongStepAnnotation a;
            a.token_range = {detail::require_field(*it, "start").get<std::size_t>(),
                             detail::require_field(*it, "end").get<std::size_t>()};
            if (auto s = it->find("sentence_index"); s != it->end()) a.sentence_index = s->get<std::size_t>();
            if (auto s = it->find("source"); s != it->end()) a.source = s->get<std::string>();
            c.annotation = a;
        }
        if (auto it = j.find("sentence_boundaries"); it != j.end() && !it->is_null()) {
            std::vector<Interval> b;
            for (const auto& pair : *it) {
                if (!pair.is_array() || pair.size() != 2) {
                    throw Error(ErrorCode::parse_error, "sentence_boundaries entries must be [start, end]");
                }
                b.push_back({pair[0].get<std::size_t>(), pair[1].get<std::size_t>()});
            }
            c.sentence_boundaries = std::move(b);
        }
        if (auto it = j.find("final_answer_correct"); it != j.end() && !it->is_null()) {
            c.final_answer_correct = it->get<bool>();
        }
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
                rec.extras[it.key()] = it.value();
            }
        }
        return rec;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::parse_error, e.what());
    }
}

struct CaseLoadOptions {
    std::optional<std::size_t> vocab_size;  // id range check skipped when absent
    bool skip_invalid = false;
};

struct CaseLoadResult {
    std::vector<CaseRecord> records;
    std::vector<std::string> problems;  // "path:line: rule"
};

inline CaseLoadResult load_case_records(const std::string& path, const CaseLoadOptions& opts = {}) {
    CaseLoadResult out;
    const Vocabulary vocab{opts.vocab_size.value_or(std::numeric_limits<TokenId>::max()), {}};
    detail::for_each_line(path, [&](const json& j, std::size_t lineno) {
        const std::string where = path + ":" + std::to_string(lineno) + ": ";
        CaseRecord rec;
        try {
            rec = case_from_json(j);
        } catch (const Error& e) {
            if (!opts.skip_invalid) throw Error(ErrorCode::parse_error, where + e.what());
            out.problems.push_back(where + e.what());
            return;
        }
        const auto violations = validate_case(rec.value, vocab);
        if (!violations.empty()) {
            if (!opts.skip_invalid) {
                throw Error(ErrorCode::validation_error, where + violations.front());
            }
            for (const auto& v : violations) out.problems.push_back(where + v);
            return;
        }
        out.records.push_back(std::move(rec));
    });
    return out;
}

inline std::vector<ReasoningCase> load_cases(const std::string& path, const CaseLoadOptions& opts = {}) {
    std::vector<ReasoningCase> out;
    for (auto& r : load_case_records(path, opts).records) out.push_back(std::move(r.value));
    return out;
}

inline void save_case_records(const std::string& path, const std::vector<CaseRecord>& records) {
    std::vector<json> lines;
    for (const auto& r : records) lines.push_back(to_json(r));
    detail::write_lines(path, lines);
}

inline void save_cases(const std::string& path, const std::vector<ReasoningCase>& cases) {
    std::vector<CaseRecord> records;
    for (const auto& c : cases) records.push_back({c, json::object()});
    save_case_records(path, records);
}

// Converts a character span of the response text into the half-open interval
// of response tokens it overlaps. token_offsets[j] = [char_begin, char_end) of
// response token j.
inline Interval char_span_to_token_interval(
    std::span<const std::pair<std::size_t, std::size_t>> token_offsets, std::size_t char_begin,
    std::size_t char_end) {
    std::optional<std::size_t> first;
    std::size_t last = 0;
    for (std::size_t j = 0; j < token_offsets.size(); ++j) {
        const auto [b, e] = token_offsets[j];
        if (b < char_end && e > char_begin) {
            if (!first) first = j;
            last = j;
        }
    }
    if (!first) throw Error(ErrorCode::invalid_argument, "character span overlaps no token");
    return {*first, last + 1};
}

// ---- traces ----

inline json to_json(const TraceRecord& t) {
    json j = {{"format_version", kFormatVersion}, {"case_id", t.case_id},
              {"chosen_logprobs", t.chosen_logprobs}, {"model", t.model}};
    if (t.distributions) j["distributions"] = *t.distributions;
    if (t.entropy) j["entropy"] = *t.entropy;
    if (t.temperature) j["temperature"] = *t.temperature;
    return j;
}

inline TraceRecord trace_from_json(const json& j) {
    try {
        detail::check_version(j);
        TraceRecord t;
        t.case_id = detail::require_field(j, "case_id").get<std::string>();
        t.chosen_logprobs = detail::require_field(j, "chosen_logprobs").get<std::vector<double>>();
        if (auto it = j.find("distributions"); it != j.end() && !it->is_null())
            t.distributions = it->get<std::vector<std::vector<double>>>();
        if (auto it = j.find("entropy"); it != j.end() && !it->is_null())
            t.entropy = it->get<std::vector<double>>();
        if (auto it = j.find("model"); it != j.end()) t.model = it->get<std::string>();
        if (auto it = j.find("temperature"); it != j.end() && !it->is_null())
            t.temperature = it->get<double>();
        return t;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::parse_error, e.what());
    }
}

inline std::vector<TraceRecord> load_traces(const std::string& path) {
    std::vector<TraceRecord> out;
    detail::for_each_line(path, [&](const json& j, std::size_t lineno) {
        try {
            out.push_back(trace_from_json(j));
        } catch (const Error& e) {
            throw Error(e.code(), path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    });
    return out;
}

inline void save_traces(const std::string& path, const std::vector<TraceRecord>& traces) {
    std::vector<json> lines;
    for (const auto& t : traces) lines.push_back(to_json(t));
    detail::write_lines(path, lines);
}

// ---- scores ----

inline json to_json(const PerturbationConfig& c) {
    return {{"sigma", c.sigma},
            {"num_samples", c.num_samples},
            {"alpha", c.alpha},
            {"mode", to_string(c.mode)},
            {"seed", c.seed},
            {"normalize_gradient", c.normalize_gradient},
            {"noise_response_only", c.noise_response_only}};
}

inline PerturbationConfig config_from_json(const json& j) {
    PerturbationConfig c;
    c.sigma = j.value("sigma", c.sigma);
    c.num_samples = j.value("num_samples", c.num_samples);
    c.alpha = j.value("alpha", c.alpha);
    c.mode = parse_mode(j.value("mode", std::string("random")));
    c.seed = j.value("seed", c.seed);
    c.normalize_gradient = j.value("normalize_gradient", c.normalize_gradient);
    c.noise_response_only = j.value("noise_response_only", c.noise_response_only);
    return c;
}

// Deterministic part of a score record.
inline json score_payload(const ScoreRecord& r) {
    return {{"format_version", kFormatVersion},
            {"case_id", r.case_id},
            {"metric", to_string(r.series.metric)},
            {"values", r.series.values},
            {"config", to_json(r.config)}};
}

inline json to_json(const ScoreRecord& r) {
    json j = score_payload(r);
    j["timing"] = {{"duration_s", r.duration_s}};
    return j;
}

inline ScoreRecord score_from_json(const json& j) {
    try {
        detail::check_version(j);
        ScoreRecord r;
        r.case_id = detail::require_field(j, "case_id").get<std::string>();
        const auto name = detail::require_field(j, "metric").get<std::string>();
        const auto metric = parse_metric(name);
        if (!metric) throw Error(ErrorCode::parse_error, "unknown metric '" + name + "'");
        r.series.metric = *metric;
        r.series.values = detail::require_field(j, "values").get<std::vector<double>>();
        if (auto it = j.find("config"); it != j.end()) r.config = config_from_json(*it);
        if (auto it = j.find("timing"); it != j.end()) r.duration_s = it->value("duration_s", 0.0);
        return r;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::parse_error, e.what());
    }
}

inline std::vector<ScoreRecord> load_scores(const std::string& path) {
    std::vector<ScoreRecord> out;
    detail::for_each_line(path, [&](const json& j, std::size_t lineno) {
        try {
            out.push_back(score_from_json(j));
        } catch (const Error& e) {
            throw Error(e.code(), path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    });
    return out;
}

inline void save_scores(const std::string& path, const std::vector<ScoreRecord>& scores) {
    std::vector<json> lines;
    for (const auto& s : scores) lines.push_back(to_json(s));
    detail::write_lines(path, lines);
}

// Newline-joined payloads with timing stripped; equal strings mean equal scores.
inline std::string score_payload_text(const std::vector<ScoreRecord>& scores) {
    std::string out;
    for (const auto& s : scores) {
        out += score_payload(s).dump();
        out += '\n';
    }
    return out;
}

inline void write_json_lines(const std::string& path, const std::vector<json>& records) {
    detail::write_lines(path, records);
}

inline Vocabulary load_vocabulary(const std::string& path) {
    // One display string per line, JSON-encoded (so newlines survive).
    Vocabulary v;
    std::ifstream f(path);
    if (!f) throw Error(ErrorCode::io_error, "cannot open " + path);
    std::string line;
    while (std::getline(f, line)) {
        try {
            v.display.push_back(json::parse(line).get<std::string>());
        } catch (const json::exception& e) {
            throw Error(ErrorCode::parse_error, path + ": " + e.what());
        }
    }
    v.size = v.display.size();
    return v;
}

}  // namespace tokuq
