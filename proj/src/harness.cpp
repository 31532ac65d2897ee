#include "cuma/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cuma/error.hpp"
#include "cuma/rng.hpp"

namespace cuma {

namespace fs = std::filesystem;

// ----------------------------- ablations -----------------------------

void Ablations::enable(std::string_view name) {
    if (name == "no-mask") {
        no_mask = true;
    } else if (name == "no-curriculum") {
        no_curriculum = true;
    } else if (name == "no-curated-data") {
        no_curated_data = true;
    } else {
        throw ConfigError("ablations", "unknown ablation '" + std::string(name) + "'");
    }
}

std::vector<std::string> Ablations::names() const {
    std::vector<std::string> out;
    if (no_mask) {
        out.emplace_back("no-mask");
    }
    if (no_curriculum) {
        out.emplace_back("no-curriculum");
    }
    if (no_curated_data) {
        out.emplace_back("no-curated-data");
    }
    return out;
}

std::string_view to_string(BasePreset p) {
    switch (p) {
        case BasePreset::none:
            return "none";
        case BasePreset::weak:
            return "weak";
        case BasePreset::strong:
            return "strong";
    }
    return "none";
}

std::string_view to_string(EvalMetric m) {
    switch (m) {
        case EvalMetric::sampled:
            return "sampled";
        case EvalMetric::greedy:
            return "greedy";
        case EvalMetric::majority:
            return "majority";
    }
    return "sampled";
}

// ----------------------------- config -----------------------------

namespace {

std::string trim_copy(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(value);
    while (std::getline(in, item, ',')) {
        auto t = trim_copy(item);
        if (!t.empty()) {
            out.push_back(t);
        }
    }
    return out;
}

std::string join(const std::vector<std::string>& items, std::string_view sep = ",") {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i > 0) {
            out += sep;
        }
        out += items[i];
    }
    return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* first = value.data();
    const char* last = value.data() + value.size();
    std::from_chars_result r{};
    if constexpr (std::is_floating_point_v<T>) {
        // from_chars for double is available in libstdc++ 11
        r = std::from_chars(first, last, out);
    } else {
        r = std::from_chars(first, last, out);
    }
    if (r.ec != std::errc() || r.ptr != last) {
        throw ConfigError(key, "cannot parse '" + value + "' as a number");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true") {
        return true;
    }
    if (value == "false") {
        return false;
    }
    throw ConfigError(key, "expected true or false, got '" + value + "'");
}

std::vector<int> parse_levels(const std::string& key, const std::string& value) {
    std::vector<int> out;
    for (const auto& item : split_list(value)) {
        const int level = parse_number<int>(key, item);
        if (level < kMinLevel || level > kMaxLevel) {
            throw ConfigError(key, "level " + item + " is outside 1..5");
        }
        out.push_back(level);
    }
    if (out.empty()) {
        throw ConfigError(key, "needs at least one level");
    }
    return out;
}

std::string fmt_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::string levels_str(const std::vector<int>& levels) {
    std::vector<std::string> s;
    for (int l : levels) {
        s.push_back(std::to_string(l));
    }
    return join(s);
}

}  // namespace

void ExperimentConfig::set(const std::string& key, const std::string& value) {
    auto size = [&] { return parse_number<std::size_t>(key, value); };
    auto u64 = [&] { return parse_number<std::uint64_t>(key, value); };
    auto dbl = [&] { return parse_number<double>(key, value); };

    if (key == "seed") {
        seed = u64();
    } else if (key == "strategy") {
        auto s = parse_strategy(value);
        if (!s) {
            throw ConfigError(key, "unknown strategy '" + value + "'");
        }
        strategy = *s;
    } else if (key == "total_steps") {
        train.total_steps = size();
    } else if (key == "batch_size") {
        train.batch_size = size();
    } else if (key == "candidates") {
        train.candidates = size();
    } else if (key == "temperature") {
        train.temperature = dbl();
    } else if (key == "max_length") {
        train.max_length = size();
    } else if (key == "lr") {
        train.peak_lr = dbl();
    } else if (key == "optimizer") {
        if (value == "sgd") {
            train.optimizer = OptimizerKind::sgd;
        } else if (value == "adamw") {
            train.optimizer = OptimizerKind::adamw;
        } else {
            throw ConfigError(key, "expected sgd or adamw");
        }
    } else if (key == "weight_decay") {
        train.weight_decay = dbl();
    } else if (key == "clip_eps") {
        train.clip_eps = dbl();
    } else if (key == "kl_coef") {
        train.kl_coef = dbl();
    } else if (key == "eps_std") {
        train.eps_std = dbl();
    } else if (key == "inner_epochs") {
        train.inner_epochs = size();
    } else if (key == "ttrl_mode_min_count") {
        ttrl_mode_min_count = parse_number<int>(key, value);
    } else if (key == "hash_buckets") {
        features.hash_buckets = parse_number<std::uint32_t>(key, value);
    } else if (key == "position_buckets") {
        features.position_buckets = parse_number<std::uint32_t>(key, value);
    } else if (key == "base_preset") {
        if (value == "weak") {
            base_preset = BasePreset::weak;
        } else if (value == "strong") {
            base_preset = BasePreset::strong;
        } else if (value == "none") {
            base_preset = BasePreset::none;
        } else {
            throw ConfigError(key, "expected weak, strong or none");
        }
    } else if (key == "base_checkpoint") {
        base_checkpoint = value;
    } else if (key == "pretrain_lr") {
        pretrain_lr = dbl();
    } else if (key == "pretrain_steps") {
        pretrain_steps = size();
    } else if (key == "pretrain_per_level") {
        pretrain_per_level = size();
    } else if (key == "pretrain_batch") {
        pretrain_batch = size();
    } else if (key == "pretrain_seed") {
        pretrain_seed = u64();
    } else if (key == "train_levels") {
        train_levels = parse_levels(key, value);
    } else if (key == "train_per_level") {
        train_per_level = size();
    } else if (key == "train_seed") {
        train_seed = u64();
    } else if (key == "ingest") {
        ingest = split_list(value);
    } else if (key == "curated") {
        curated = split_list(value);
    } else if (key == "curriculum") {
        curriculum = parse_bool(key, value);
    } else if (key == "steps_per_bin") {
        const auto items = split_list(value);
        if (items.empty() || value == "auto") {
            steps_per_bin.reset();
        } else {
            if (items.size() != kNumLevels) {
                throw ConfigError(key, "needs five comma-separated step counts");
            }
            StepsPerBin s{};
            for (std::size_t i = 0; i < s.size(); ++i) {
                s[i] = parse_number<std::size_t>(key, items[i]);
            }
            steps_per_bin = s;
        }
    } else if (key == "eval_levels") {
        eval_levels = parse_levels(key, value);
    } else if (key == "eval_per_level") {
        eval_per_level = size();
    } else if (key == "eval_seed") {
        eval_seed = u64();
    } else if (key == "eval_corpus") {
        eval_corpus = value;
    } else if (key == "eval_every") {
        eval_every = size();
    } else if (key == "eval_samples") {
        eval_samples = size();
    } else if (key == "eval_metric") {
        if (value == "sampled") {
            eval_metric = EvalMetric::sampled;
        } else if (value == "greedy") {
            eval_metric = EvalMetric::greedy;
        } else if (value == "majority") {
            eval_metric = EvalMetric::majority;
        } else {
            throw ConfigError(key, "expected sampled, greedy or majority");
        }
    } else if (key == "checkpoint_every") {
        checkpoint_every = size();
    } else if (key == "threads") {
        threads = parse_number<int>(key, value);
    } else if (key == "difficulty_trials") {
        difficulty_trials = size();
    } else if (key == "difficulty_thresholds") {
        const auto items = split_list(value);
        if (items.size() != thresholds.bounds.size()) {
            throw ConfigError(key, "needs four comma-separated consensus-rate bounds");
        }
        for (std::size_t i = 0; i < items.size(); ++i) {
            thresholds.bounds[i] = parse_number<double>(key, items[i]);
        }
    } else if (key == "ablations") {
        ablations = {};
        for (const auto& a : split_list(value)) {
            ablations.enable(a);
        }
    } else {
        throw ConfigError(key, "unknown configuration key");
    }
}

std::map<std::string, std::string> ExperimentConfig::to_key_values() const {
    std::map<std::string, std::string> kv;
    kv["seed"] = std::to_string(seed);
    kv["strategy"] = std::string(to_string(strategy));
    kv["total_steps"] = std::to_string(train.total_steps);
    kv["batch_size"] = std::to_string(train.batch_size);
    kv["candidates"] = std::to_string(train.candidates);
    kv["temperature"] = fmt_double(train.temperature);
    kv["max_length"] = std::to_string(train.max_length);
    kv["lr"] = fmt_double(train.peak_lr);
    kv["optimizer"] = train.optimizer == OptimizerKind::sgd ? "sgd" : "adamw";
    kv["weight_decay"] = fmt_double(train.weight_decay);
    kv["clip_eps"] = fmt_double(train.clip_eps);
    kv["kl_coef"] = fmt_double(train.kl_coef);
    kv["eps_std"] = fmt_double(train.eps_std);
    kv["inner_epochs"] = std::to_string(train.inner_epochs);
    kv["ttrl_mode_min_count"] = std::to_string(ttrl_mode_min_count);
    kv["hash_buckets"] = std::to_string(features.hash_buckets);
    kv["position_buckets"] = std::to_string(features.position_buckets);
    kv["base_preset"] = std::string(to_string(base_preset));
    kv["base_checkpoint"] = base_checkpoint;
    kv["pretrain_lr"] = fmt_double(pretrain_lr);
    kv["pretrain_steps"] = std::to_string(pretrain_steps);
    kv["pretrain_per_level"] = std::to_string(pretrain_per_level);
    kv["pretrain_batch"] = std::to_string(pretrain_batch);
    kv["pretrain_seed"] = std::to_string(pretrain_seed);
    kv["train_levels"] = levels_str(train_levels);
    kv["train_per_level"] = std::to_string(train_per_level);
    kv["train_seed"] = std::to_string(train_seed);
    kv["ingest"] = join(ingest);
    kv["curated"] = join(curated);
    kv["curriculum"] = curriculum ? "true" : "false";
    if (steps_per_bin) {
        std::vector<std::string> s;
        for (auto x : *steps_per_bin) {
            s.push_back(std::to_string(x));
        }
        kv["steps_per_bin"] = join(s);
    } else {
        kv["steps_per_bin"] = "auto";
    }
    kv["eval_levels"] = levels_str(eval_levels);
    kv["eval_per_level"] = std::to_string(eval_per_level);
    kv["eval_seed"] = std::to_string(eval_seed);
    kv["eval_corpus"] = eval_corpus;
    kv["eval_every"] = std::to_string(eval_every);
    kv["eval_samples"] = std::to_string(eval_samples);
    kv["eval_metric"] = std::string(to_string(eval_metric));
    kv["checkpoint_every"] = std::to_string(checkpoint_every);
    kv["threads"] = std::to_string(threads);
    kv["difficulty_trials"] = std::to_string(difficulty_trials);
    {
        std::vector<std::string> s;
        for (double b : thresholds.bounds) {
            s.push_back(fmt_double(b));
        }
        kv["difficulty_thresholds"] = join(s);
    }
    kv["ablations"] = join(ablations.names());
    return kv;
}

void ExperimentConfig::validate() const {
    train.validate();
    if (ttrl_mode_min_count < 0) {
        throw ConfigError("ttrl_mode_min_count", "must be non-negative");
    }
    if (features.hash_buckets == 0) {
        throw ConfigError("hash_buckets", "must be positive");
    }
    if (features.position_buckets == 0) {
        throw ConfigError("position_buckets", "must be positive");
    }
    if (eval_samples < 2) {
        throw ConfigError("eval_samples", "must be at least 2");
    }
    if (eval_every == 0) {
        throw ConfigError("eval_every", "must be positive");
    }
    if (difficulty_trials == 0) {
        throw ConfigError("difficulty_trials", "must be positive");
    }
    if (steps_per_bin) {
        std::size_t total = 0;
        for (auto s : *steps_per_bin) {
            total += s;
        }
        if (total != train.total_steps) {
            throw ConfigError("steps_per_bin", "must sum to total_steps (" + std::to_string(train.total_steps) + ")");
        }
    }
    if (base_preset == BasePreset::none && base_checkpoint.empty() && pretrain_steps > 0) {
        throw ConfigError("pretrain_steps", "needs a base_preset to choose the pretraining data");
    }
}

ExperimentConfig parse_config(std::string_view text, const fs::path& base_dir) {
    ExperimentConfig config;
    config.base_dir = base_dir;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        // strip comments outside quotes
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') {
                quoted = !quoted;
            } else if (line[i] == '#' && !quoted) {
                line.resize(i);
                break;
            }
        }
        const auto t = trim_copy(line);
        if (t.empty()) {
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(t, "line " + std::to_string(line_no) + " is not key = value");
        }
        const auto key = trim_copy(t.substr(0, eq));
        auto value = trim_copy(t.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '[' && value.back() == ']') {
            value = value.substr(1, value.size() - 2);
            std::string cleaned;
            for (char c : value) {
                if (c != '"') {
                    cleaned += c;
                }
            }
            value = cleaned;
        } else if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
            value = value.substr(1, value.size() - 2);
        }
        config.set(key, value);
    }
    return config;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read config " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.parent_path());
}

std::string render_config(const ExperimentConfig& config) {
    static const std::set<std::string> kLists{"train_levels", "eval_levels", "ingest", "curated", "steps_per_bin",
                                              "difficulty_thresholds", "ablations"};
    static const std::set<std::string> kStrings{"strategy", "optimizer", "base_preset", "base_checkpoint",
                                                "eval_corpus", "eval_metric"};
    std::ostringstream out;
    for (const auto& [k, v] : config.to_key_values()) {
        if (kLists.count(k) != 0) {
            if (k == "steps_per_bin" && v == "auto") {
                out << k << " = \"auto\"\n";
                continue;
            }
            const bool numeric = k == "train_levels" || k == "eval_levels" || k == "steps_per_bin" ||
                                 k == "difficulty_thresholds";
            std::vector<std::string> items = split_list(v);
            if (!numeric) {
                for (auto& i : items) {
                    i = '"' + i + '"';
                }
            }
            out << k << " = [" << join(items, ", ") << "]\n";
        } else if (kStrings.count(k) != 0) {
            out << k << " = \"" << v << "\"\n";
        } else {
            out << k << " = " << v << '\n';
        }
    }
    return out.str();
}

// ----------------------------- evaluation -----------------------------

double EvalReport::metric(EvalMetric m) const {
    switch (m) {
        case EvalMetric::sampled:
            return sampled;
        case EvalMetric::greedy:
            return greedy;
        case EvalMetric::majority:
            return majority;
    }
    return sampled;
}

std::string EvalReport::table() const {
    std::ostringstream s;
    char buf[128];
    s << "level  count  greedy  maj@N  sampled\n";
    for (std::size_t l = 0; l < per_level.size(); ++l) {
        const auto& r = per_level[l];
        if (r.count == 0) {
            continue;
        }
        std::snprintf(buf, sizeof buf, "%5zu  %5zu  %6.4f  %5.4f  %7.4f\n", l + 1, r.count, r.greedy, r.majority,
                      r.sampled);
        s << buf;
    }
    std::snprintf(buf, sizeof buf, "  all  %5zu  %6.4f  %5.4f  %7.4f\n", count, greedy, majority, sampled);
    s << buf;
    return s.str();
}

EvalReport evaluate(const PolicyParams& params, std::span<const TaskInstance> corpus, std::size_t n,
                    double temperature, std::size_t max_length, std::uint64_t seed, Exec exec) {
    for (const auto& t : corpus) {
        if (!t.gold_answer) {
            throw InvalidInput("evaluation instance '" + t.id + "' has no gold answer");
        }
    }
    struct Item {
        double greedy = 0.0, majority = 0.0, sampled = 0.0;
    };
    std::vector<Item> items(corpus.size());
    const auto& vocab = params.vocab();
    const auto count = static_cast<std::ptrdiff_t>(corpus.size());
    auto one = [&](std::ptrdiff_t i) {
        const auto idx = static_cast<std::size_t>(i);
        const auto& t = corpus[idx];
        const auto gold = CanonicalAnswer::from_text(*t.gold_answer);
        auto& it = items[idx];
        it.greedy = extract_answer(vocab, greedy_decode(params, t, max_length)) == gold ? 1.0 : 0.0;
        const auto group = sample_group(params, t, n, temperature, max_length, derive_seed(seed, {0xE7A1ULL, idx}));
        const auto answers = extract_answers(vocab, group);
        const auto mv = majority_vote(answers);
        it.majority = mv.majority.has_value() && mv.majority == gold ? 1.0 : 0.0;
        double hits = 0.0;
        for (const auto& a : answers) {
            hits += a.has_value() && a == gold ? 1.0 : 0.0;
        }
        it.sampled = hits / static_cast<double>(answers.size());
    };
    if (exec == Exec::serial) {
        for (std::ptrdiff_t i = 0; i < count; ++i) {
            one(i);
        }
    } else {
#pragma omp parallel for schedule(dynamic)
        for (std::ptrdiff_t i = 0; i < count; ++i) {
            one(i);
        }
    }

    EvalReport rep;
    rep.count = corpus.size();
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        rep.greedy += items[i].greedy;
        rep.majority += items[i].majority;
        rep.sampled += items[i].sampled;
        if (corpus[i].level) {
            auto& l = rep.per_level[static_cast<std::size_t>(*corpus[i].level - 1)];
            ++l.count;
            l.greedy += items[i].greedy;
            l.majority += items[i].majority;
            l.sampled += items[i].sampled;
        }
    }
    if (rep.count > 0) {
        const double inv = 1.0 / static_cast<double>(rep.count);
        rep.greedy *= inv;
        rep.majority *= inv;
        rep.sampled *= inv;
    }
    for (auto& l : rep.per_level) {
        if (l.count > 0) {
            const double inv = 1.0 / static_cast<double>(l.count);
            l.greedy *= inv;
            l.majority *= inv;
            l.sampled *= inv;
        }
    }
    return rep;
}

// ----------------------------- metrics -----------------------------

std::string metrics_header(std::size_t candidates) {
    std::string h = "step,phase_level,mean_reward,masked_fraction,consensus_rate";
    for (std::size_t i = 0; i <= candidates; ++i) {
        h += ",hist_" + std::to_string(i);
    }
    h += ",eval_accuracy,mean_response_length,self_certainty,kl_ref,lr";
    return h;
}

namespace {

std::string num(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return buf;
}

}  // namespace

std::string metrics_row(const MetricsRecord& r) {
    std::string row = std::to_string(r.step) + ',' + std::to_string(r.phase_level) + ',' + num(r.mean_reward) + ',' +
                      num(r.masked_fraction) + ',' + num(r.consensus_rate);
    for (auto c : r.correct_histogram) {
        row += ',' + std::to_string(c);
    }
    row += ',' + (r.eval_accuracy ? num(*r.eval_accuracy) : std::string());
    row += ',' + num(r.mean_response_length) + ',' + num(r.self_certainty) + ',' + num(r.kl_ref) + ',' + num(r.lr);
    return row;
}

std::vector<std::size_t> correct_rollout_histogram(const Vocabulary& vocab, std::span<const RolloutGroup> groups,
                                                   std::span<const TaskInstance> batch, std::size_t candidates) {
    std::vector<std::size_t> hist(candidates + 1, 0);
    for (std::size_t i = 0; i < groups.size(); ++i) {
        if (!batch[i].gold_answer) {
            continue;
        }
        const auto gold = CanonicalAnswer::from_text(*batch[i].gold_answer);
        std::size_t correct = 0;
        for (const auto& c : groups[i].candidates) {
            const auto a = extract_answer(vocab, c.tokens);
            correct += a.has_value() && a == gold ? 1 : 0;
        }
        ++hist[std::min(correct, candidates)];
    }
    return hist;
}

// ----------------------------- inputs -----------------------------

std::vector<LabeledExample> preset_pretrain_data(const ExperimentConfig& config, const Vocabulary& vocab) {
    std::vector<int> levels;
    switch (config.base_preset) {
        case BasePreset::weak:
            levels = {1};
            break;
        case BasePreset::strong:
            levels = {1, 2, 3};
            break;
        case BasePreset::none:
            break;
    }
    std::vector<LabeledExample> data;
    for (int level : levels) {
        for (const auto& t : generate_corpus(level, config.pretrain_per_level, config.pretrain_seed)) {
            data.push_back(make_labeled(vocab, t));
        }
    }
    return data;
}

PolicyParams build_base(const ExperimentConfig& config) {
    if (!config.base_checkpoint.empty()) {
        fs::path p = config.base_checkpoint;
        if (p.is_relative() && !config.base_dir.empty() && !fs::exists(p)) {
            p = config.base_dir / p;
        }
        return read_checkpoint(p);
    }
    PolicyParams params(Vocabulary::standard(), config.features);
    params.seed = config.pretrain_seed;
    if (config.base_preset == BasePreset::none) {
        return params;
    }
    const std::size_t steps = config.pretrain_steps > 0 ? config.pretrain_steps
                              : config.base_preset == BasePreset::weak ? 200
                                                                        : 2000;
    const auto data = preset_pretrain_data(config, params.vocab());
    PretrainOptions opt{steps, config.pretrain_lr, config.pretrain_batch, config.pretrain_seed};
    return pretrain(std::move(params), data, opt);
}

namespace {

fs::path resolve(const ExperimentConfig& config, const std::string& p) {
    fs::path path = p;
    if (path.is_relative() && !config.base_dir.empty() && !fs::exists(path)) {
        path = config.base_dir / path;
    }
    return path;
}

std::vector<TaskInstance> build_generated(const std::vector<int>& levels, std::size_t per_level, std::uint64_t seed) {
    std::vector<TaskInstance> out;
    for (int level : levels) {
        auto part = generate_corpus(level, per_level, seed);
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

}  // namespace

ExperimentInputs prepare_inputs(const ExperimentConfig& config) {
    config.validate();
    ExperimentInputs in{{}, {}, build_base(config)};
    if (config.train_per_level > 0) {
        in.train = build_generated(config.train_levels, config.train_per_level, config.train_seed);
    }
    for (const auto& p : config.ingest) {
        auto r = ingest_jsonl(resolve(config, p));
        for (auto& t : r.instances) {
            t.source = Source::ingested;
        }
        in.train.insert(in.train.end(), r.instances.begin(), r.instances.end());
    }
    for (const auto& p : config.curated) {
        auto r = ingest_jsonl(resolve(config, p));
        for (auto& t : r.instances) {
            t.source = Source::curated;
        }
        in.train.insert(in.train.end(), r.instances.begin(), r.instances.end());
    }
    if (!config.eval_corpus.empty()) {
        in.eval = ingest_jsonl(resolve(config, config.eval_corpus)).instances;
    } else {
        in.eval = build_generated(config.eval_levels, config.eval_per_level, config.eval_seed);
    }
    return in;
}

// ----------------------------- digests & manifest -----------------------------

namespace {

std::string hex_digest(std::uint64_t h) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "fnv1a64:%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::uint64_t fnv_update(std::uint64_t h, std::string_view data) {
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t kFnvBasis = 0xcbf29ce484222325ULL;

}  // namespace

std::string corpus_digest(std::span<const TaskInstance> instances) {
    std::uint64_t h = kFnvBasis;
    for (const auto& t : instances) {
        h = fnv_update(h, to_jsonl_line(t));
        h = fnv_update(h, "\n");
    }
    return hex_digest(h);
}

std::string file_digest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return hex_digest(fnv_update(kFnvBasis, ss.str()));
}

std::vector<std::string> validate_manifest(const fs::path& out_dir) {
    std::ifstream in(out_dir / "manifest.json");
    if (!in) {
        throw IoError("no manifest.json in " + out_dir.string());
    }
    const auto j = nlohmann::json::parse(in);
    std::vector<std::string> bad;
    for (const auto& [name, digest] : j.at("corpus_digests").items()) {
        const auto p = out_dir / name;
        if (!fs::exists(p) || file_digest(p) != digest.get<std::string>()) {
            bad.push_back(name);
        }
    }
    return bad;
}

namespace {

nlohmann::ordered_json eval_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["greedy"] = r.greedy;
    j["majority"] = r.majority;
    j["sampled"] = r.sampled;
    auto levels = nlohmann::ordered_json::array();
    for (std::size_t l = 0; l < r.per_level.size(); ++l) {
        if (r.per_level[l].count > 0) {
            levels.push_back({{"level", l + 1},
                              {"count", r.per_level[l].count},
                              {"greedy", r.per_level[l].greedy},
                              {"majority", r.per_level[l].majority},
                              {"sampled", r.per_level[l].sampled}});
        }
    }
    j["per_level"] = levels;
    return j;
}

void write_text(const fs::path& path, const std::string& text) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) {
            throw IoError("cannot write " + tmp);
        }
        out << text;
        if (!out) {
            throw IoError("short write on " + tmp);
        }
    }
    fs::rename(tmp, path);
}

class MetricsWriter {
public:
    MetricsWriter(const fs::path& path, std::size_t candidates) : out_(path, std::ios::binary) {
        if (!out_) {
            throw IoError("cannot write " + path.string());
        }
        out_ << metrics_header(candidates) << '\n';
    }
    void write(const MetricsRecord& r) {
        out_ << metrics_row(r) << '\n';
        out_.flush();
        if (!out_) {
            throw IoError("write failure on metrics.csv");
        }
    }

private:
    std::ofstream out_;
};

}  // namespace

// ----------------------------- training loop -----------------------------

RunResult run_training(const ExperimentConfig& config, ExperimentInputs inputs,
                       const std::optional<fs::path>& out_dir) {
    config.validate();
    set_num_threads(config.threads);

    TrainConfig train = config.train;
    train.seed = config.seed;
    const std::size_t n = train.candidates;

    PolicyParams params = std::move(inputs.base);
    const PolicyParams ref = params;
    const auto& vocab = params.vocab();

    std::vector<TaskInstance> corpus = std::move(inputs.train);
    if (config.ablations.no_curated_data) {
        std::erase_if(corpus, [](const TaskInstance& t) { return t.source != Source::ingested; });
        if (corpus.empty()) {
            throw ConfigError("ablations", "no-curated-data leaves no ingested training instances");
        }
    }
    if (corpus.empty()) {
        throw ConfigError("train_per_level", "training corpus is empty");
    }
    for (auto& t : corpus) {
        if (!t.level) {
            t.level = estimate_difficulty(ref, t, n, train.temperature, config.difficulty_trials,
                                          derive_seed(config.seed, {0xD1FFULL, prompt_hash(t.id)}), train.max_length,
                                          config.thresholds);
        }
    }
    const auto bins = partition_bins(corpus);
    const bool sequential = config.curriculum && !config.ablations.no_curriculum;
    const auto steps = config.steps_per_bin.value_or(uniform_steps(train.total_steps));
    auto schedule = build_schedule(bins, steps, sequential);

    const std::uint64_t eval_seed = derive_seed(config.seed, {0xE7A15EEDULL});
    RunResult result{{}, 0.0, 0.0, {}, {}, params, schedule.summary()};
    result.base_eval = evaluate(params, inputs.eval, config.eval_samples, train.temperature, train.max_length, eval_seed);
    result.base_accuracy = result.base_eval.metric(config.eval_metric);
    result.final_eval = result.base_eval;

    std::optional<MetricsWriter> writer;
    nlohmann::ordered_json manifest;
    std::vector<std::string> checkpoints;
    auto write_manifest = [&](std::string_view status) {
        if (!out_dir) {
            return;
        }
        manifest["status"] = status;
        manifest["checkpoints"] = checkpoints;
        write_text(*out_dir / "manifest.json", manifest.dump(2) + "\n");
    };
    if (out_dir) {
        fs::create_directories(*out_dir);
        write_jsonl(*out_dir / "train_corpus.jsonl", corpus);
        write_jsonl(*out_dir / "eval_corpus.jsonl", inputs.eval);
        write_checkpoint(*out_dir / "checkpoint_base.json", ref);
        manifest["seed"] = config.seed;
        manifest["strategy"] = std::string(to_string(config.strategy));
        manifest["ablations"] = config.ablations.names();
        nlohmann::ordered_json cfg;
        for (const auto& [k, v] : config.to_key_values()) {
            cfg[k] = v;
        }
        manifest["config"] = cfg;
        manifest["corpus_digests"] = {{"train_corpus.jsonl", file_digest(*out_dir / "train_corpus.jsonl")},
                                      {"eval_corpus.jsonl", file_digest(*out_dir / "eval_corpus.jsonl")}};
        nlohmann::ordered_json inputs_digest = nlohmann::ordered_json::object();
        for (const auto& p : config.ingest) {
            inputs_digest[p] = file_digest(resolve(config, p));
        }
        for (const auto& p : config.curated) {
            inputs_digest[p] = file_digest(resolve(config, p));
        }
        if (!config.eval_corpus.empty()) {
            inputs_digest[config.eval_corpus] = file_digest(resolve(config, config.eval_corpus));
        }
        manifest["input_digests"] = inputs_digest;
        manifest["start_checkpoint"] = "checkpoint_base.json";
        manifest["end_checkpoint"] = nullptr;
        manifest["schedule"] = schedule.summary();
        write_manifest("running");
        writer.emplace(*out_dir / "metrics.csv", n);
    }

    SignalOptions signal_opts;
    signal_opts.ttrl_mode_min_count = config.ttrl_mode_min_count;
    signal_opts.disable_mask = config.ablations.no_mask;

    Optimizer optimizer(train, params.weights().size());
    try {
        for (std::size_t step = 0; step < train.total_steps; ++step) {
            auto batch = next_batch(schedule, bins, train.batch_size, config.seed, step);
            if (!batch) {
                break;
            }
            const auto groups =
                sample_batch(params, batch->instances, n, train.temperature, train.max_length, config.seed, step);

            std::vector<GroupSignal> signals;
            signals.reserve(groups.size());
            for (std::size_t i = 0; i < groups.size(); ++i) {
                // gold is handed over only to the verifier strategy
                std::optional<std::string> gold;
                if (config.strategy == RewardStrategy::verifier) {
                    gold = batch->instances[i].gold_answer;
                }
                auto sig = compute_signal(config.strategy, groups[i], params, gold, signal_opts);
                if (config.ablations.no_mask) {
                    sig.keep = true;
                }
                signals.push_back(std::move(sig));
            }
            std::vector<GroupBatchItem> items;
            items.reserve(groups.size());
            for (std::size_t i = 0; i < groups.size(); ++i) {
                items.push_back({&groups[i], &signals[i]});
            }

            MetricsRecord rec;
            rec.step = step;
            rec.phase_level = batch->level;
            double length = 0.0;
            std::size_t no_consensus = 0;
            for (std::size_t i = 0; i < groups.size(); ++i) {
                for (const auto& c : groups[i].candidates) {
                    length += static_cast<double>(c.tokens.size());
                }
                no_consensus += signals[i].consensus_count < kMaskThreshold ? 1 : 0;
            }
            rec.mean_response_length = length / static_cast<double>(groups.size() * n);
            rec.no_consensus_fraction = static_cast<double>(no_consensus) / static_cast<double>(groups.size());
            const auto sc = group_self_certainty(params, groups);
            for (double s : sc) {
                rec.self_certainty += s;
            }
            rec.self_certainty /= static_cast<double>(sc.size());
            rec.correct_histogram = correct_rollout_histogram(vocab, groups, batch->instances, n);

            const auto stats = train_step(params, items, train, ref, step, optimizer, Exec::parallel);
            rec.mean_reward = stats.mean_reward;
            rec.masked_fraction = static_cast<double>(stats.masked) / static_cast<double>(stats.groups);
            rec.consensus_rate = stats.consensus_rate;
            rec.kl_ref = stats.kl_ref;
            rec.lr = stats.lr;

            const bool last = step + 1 == train.total_steps;
            if ((step + 1) % config.eval_every == 0 || last) {
                result.final_eval = evaluate(params, inputs.eval, config.eval_samples, train.temperature,
                                             train.max_length, eval_seed);
                rec.eval_accuracy = result.final_eval.metric(config.eval_metric);
            }
            if (writer) {
                writer->write(rec);
                if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && !last) {
                    const auto name = "checkpoint_step" + std::to_string(step + 1) + ".json";
                    write_checkpoint(*out_dir / name, params);
                    checkpoints.push_back(name);
                    write_manifest("running");
                }
            }
            result.records.push_back(std::move(rec));
        }
    } catch (...) {
        write_manifest("aborted");
        throw;
    }

    result.final_accuracy = result.final_eval.metric(config.eval_metric);
    if (out_dir) {
        write_checkpoint(*out_dir / "checkpoint_final.json", params);
        checkpoints.push_back("checkpoint_final.json");
        manifest["end_checkpoint"] = "checkpoint_final.json";
        manifest["results"] = {{"metric", std::string(to_string(config.eval_metric))},
                               {"base_eval_accuracy", result.base_accuracy},
                               {"final_eval_accuracy", result.final_accuracy},
                               {"base", eval_json(result.base_eval)},
                               {"final", eval_json(result.final_eval)}};
        write_manifest("complete");
    }
    result.final_params = std::move(params);
    return result;
}

int run_experiment(const ExperimentConfig& config, const fs::path& out_dir) {
    auto inputs = prepare_inputs(config);
    const auto r = run_training(config, std::move(inputs), out_dir);
    std::cout << "schedule: " << r.schedule_summary << '\n'
              << "base " << to_string(config.eval_metric) << " accuracy:  " << r.base_accuracy << '\n'
              << "final " << to_string(config.eval_metric) << " accuracy: " << r.final_accuracy << '\n'
              << r.final_eval.table();
    return 0;
}

// ----------------------------- sweep -----------------------------

std::string LevelRange::label() const { return std::to_string(lo) + ".." + std::to_string(hi); }

LevelRange parse_range(std::string_view text) {
    const auto dots = text.find("..");
    if (dots == std::string_view::npos) {
        throw InvalidInput("level range must look like 1..3: '" + std::string(text) + "'");
    }
    LevelRange r;
    const auto lo = std::string(text.substr(0, dots));
    const auto hi = std::string(text.substr(dots + 2));
    auto to_int = [&](const std::string& s) {
        int v = 0;
        const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
            throw InvalidInput("bad level range '" + std::string(text) + "'");
        }
        return v;
    };
    r.lo = to_int(lo);
    r.hi = to_int(hi);
    if (r.lo < kMinLevel || r.hi > kMaxLevel || r.lo > r.hi) {
        throw InvalidInput("level range '" + std::string(text) + "' must satisfy 1 <= lo <= hi <= 5");
    }
    return r;
}

std::vector<SweepRow> sweep_difficulty(const ExperimentConfig& config, std::span<const LevelRange> ranges,
                                       const std::optional<fs::path>& out_dir) {
    ExperimentConfig base_cfg = config;
    base_cfg.strategy = RewardStrategy::ttrl;
    base_cfg.curriculum = false;
    base_cfg.steps_per_bin.reset();
    const auto shared = prepare_inputs(base_cfg);

    std::vector<SweepRow> rows;
    for (const auto& range : ranges) {
        ExperimentConfig cfg = base_cfg;
        cfg.train_levels.clear();
        for (int l = range.lo; l <= range.hi; ++l) {
            cfg.train_levels.push_back(l);
        }
        ExperimentInputs in{build_generated(cfg.train_levels, cfg.train_per_level, cfg.train_seed), shared.eval,
                            shared.base};
        for (const auto& t : shared.train) {
            if (t.source != Source::generated && t.level && *t.level >= range.lo && *t.level <= range.hi) {
                in.train.push_back(t);
            }
        }
        std::optional<fs::path> dir;
        if (out_dir) {
            dir = *out_dir / ("range_" + std::to_string(range.lo) + "_" + std::to_string(range.hi));
        }
        const auto r = run_training(cfg, std::move(in), dir);
        SweepRow row;
        row.range = range;
        row.base_accuracy = r.base_accuracy;
        row.final_accuracy = r.final_accuracy;
        if (!r.records.empty()) {
            row.masked_fraction_step0 = r.records.front().masked_fraction;
            row.no_consensus_step0 = r.records.front().no_consensus_fraction;
        }
        rows.push_back(row);
    }
    if (out_dir) {
        write_text(*out_dir / "sweep.csv", sweep_table(rows));
    }
    return rows;
}

std::string sweep_table(std::span<const SweepRow> rows) {
    std::string out = "range,base_accuracy,final_accuracy,masked_fraction_step0,no_consensus_step0\n";
    for (const auto& r : rows) {
        out += r.range.label() + ',' + num(r.base_accuracy) + ',' + num(r.final_accuracy) + ',' +
               num(r.masked_fraction_step0) + ',' + num(r.no_consensus_step0) + '\n';
    }
    return out;
}

// ----------------------------- plotting data -----------------------------

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) {
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
        out.emplace_back();
    }
    return out;
}

void check_schema(const std::vector<std::string>& cols, const fs::path& file) {
    static const std::vector<std::string> head{"step", "phase_level", "mean_reward", "masked_fraction",
                                               "consensus_rate"};
    static const std::vector<std::string> tail{"eval_accuracy", "mean_response_length", "self_certainty", "kl_ref",
                                               "lr"};
    auto fail = [&](const std::string& col) {
        throw InvalidInput(file.string() + ": unexpected metrics column '" + col + "'");
    };
    if (cols.size() < head.size() + tail.size() + 1) {
        fail(cols.empty() ? std::string() : cols.back());
    }
    for (std::size_t i = 0; i < head.size(); ++i) {
        if (cols[i] != head[i]) {
            fail(cols[i]);
        }
    }
    const std::size_t hist = cols.size() - head.size() - tail.size();
    for (std::size_t i = 0; i < hist; ++i) {
        if (cols[head.size() + i] != "hist_" + std::to_string(i)) {
            fail(cols[head.size() + i]);
        }
    }
    for (std::size_t i = 0; i < tail.size(); ++i) {
        if (cols[head.size() + hist + i] != tail[i]) {
            fail(cols[head.size() + hist + i]);
        }
    }
}

}  // namespace

std::vector<std::string> metric_columns(const fs::path& metrics_file) {
    std::ifstream in(metrics_file);
    if (!in) {
        throw IoError("cannot read " + metrics_file.string());
    }
    std::string header;
    std::getline(in, header);
    auto cols = split_csv(header);
    check_schema(cols, metrics_file);
    cols.erase(cols.begin());
    return cols;
}

std::string emit_plots_data(std::span<const fs::path> metrics_files, std::span<const std::string> metrics) {
    std::string out = "run_id,step,metric,value\n";
    for (const auto& file : metrics_files) {
        std::ifstream in(file);
        if (!in) {
            throw IoError("cannot read " + file.string());
        }
        std::string line;
        std::getline(in, line);
        const auto cols = split_csv(line);
        check_schema(cols, file);
        std::vector<std::size_t> picks;
        for (const auto& m : metrics) {
            auto it = std::find(cols.begin() + 1, cols.end(), m);
            if (it == cols.end()) {
                throw InvalidInput(file.string() + ": no metric column '" + m + "'");
            }
            picks.push_back(static_cast<std::size_t>(it - cols.begin()));
        }
        auto run_id = file.parent_path().filename().string();
        if (run_id.empty()) {
            run_id = file.stem().string();
        }
        while (std::getline(in, line)) {
            if (line.empty()) {
                continue;
            }
            const auto cells = split_csv(line);
            if (cells.size() != cols.size()) {
                throw InvalidInput(file.string() + ": row for step '" + (cells.empty() ? "" : cells[0]) +
                                   "' has " + std::to_string(cells.size()) + " cells, expected " +
                                   std::to_string(cols.size()));
            }
            for (std::size_t k = 0; k < picks.size(); ++k) {
                const auto& v = cells[picks[k]];
                if (v.empty()) {
                    continue;
                }
                out += run_id + ',' + cells[0] + ',' + metrics[k] + ',' + v + '\n';
            }
        }
    }
    return out;
}

}  // namespace cuma
