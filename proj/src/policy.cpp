#include "cuma/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cuma/error.hpp"
#include "cuma/rng.hpp"

namespace cuma {

namespace {

constexpr const char* kSep = "SEP";
constexpr const char* kEos = "EOS";

}  // namespace

// ----------------------------- vocabulary -----------------------------

Vocabulary Vocabulary::standard() {
    std::vector<std::string> tokens;
    for (int d = 0; d <= 9; ++d) {
        tokens.push_back(std::to_string(d));
    }
    tokens.insert(tokens.end(), {"-", "+", kSep, kEos});
    return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < 2 || tokens.size() > kMaxVocab) {
        throw InvalidInput("vocabulary size must be in 2.." + std::to_string(kMaxVocab));
    }
    Vocabulary v;
    int seps = 0;
    int eoss = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (std::count(tokens.begin(), tokens.end(), tokens[i]) != 1) {
            throw InvalidInput("duplicate vocabulary token '" + tokens[i] + "'");
        }
        if (tokens[i] == kSep) {
            v.sep_ = static_cast<TokenId>(i);
            ++seps;
        }
        if (tokens[i] == kEos) {
            v.eos_ = static_cast<TokenId>(i);
            ++eoss;
        }
    }
    if (seps != 1 || eoss != 1) {
        throw InvalidInput("vocabulary must contain SEP and EOS exactly once");
    }
    v.tokens_ = std::move(tokens);
    return v;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (tokens_[i] == token) {
            return static_cast<TokenId>(i);
        }
    }
    return std::nullopt;
}

Sequence Vocabulary::encode_answer(std::string_view answer) const {
    Sequence seq{sep_};
    for (char c : answer) {
        auto id = find(std::string_view(&c, 1));
        if (!id) {
            throw InvalidInput(std::string("answer character '") + c + "' is not in the vocabulary");
        }
        seq.push_back(*id);
    }
    seq.push_back(eos_);
    return seq;
}

std::string Vocabulary::render(std::span<const TokenId> seq) const {
    std::string out;
    for (auto t : seq) {
        const auto& s = token(t);
        if (s.size() > 1) {
            out += '<' + s + '>';
        } else {
            out += s;
        }
    }
    return out;
}

// ----------------------------- features -----------------------------

FeatureLayout::FeatureLayout(const FeatureConfig& config, std::size_t vocab_size)
    : config_(config), vocab_size_(static_cast<std::uint32_t>(vocab_size)) {
    if (config.hash_buckets == 0 || config.position_buckets == 0) {
        throw InvalidInput("feature config needs at least one hash bucket and one position bucket");
    }
    prev_base_ = 1;
    pos_base_ = prev_base_ + vocab_size_ + 1;
    prompt_base_ = pos_base_ + config.position_buckets;
    cross_base_ = prompt_base_ + config.hash_buckets;
    count_ = cross_base_ + config.hash_buckets * config.position_buckets;
}

std::uint32_t FeatureLayout::prev_token(std::optional<TokenId> prev) const noexcept {
    return prev_base_ + (prev ? *prev : vocab_size_);
}

std::uint32_t FeatureLayout::position_bucket(std::size_t t) const noexcept {
    return static_cast<std::uint32_t>(std::min<std::size_t>(t, config_.position_buckets - 1));
}

std::uint32_t FeatureLayout::position(std::size_t t) const noexcept { return pos_base_ + position_bucket(t); }

std::uint32_t FeatureLayout::prompt(std::uint64_t h) const noexcept {
    return prompt_base_ + static_cast<std::uint32_t>(h % config_.hash_buckets);
}

std::uint32_t FeatureLayout::cross(std::uint64_t h, std::size_t t) const noexcept {
    const auto bucket = static_cast<std::uint32_t>(h % config_.hash_buckets);
    return cross_base_ + bucket * config_.position_buckets + position_bucket(t);
}

std::uint64_t prompt_hash(std::string_view prompt) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : prompt) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

ActiveFeatures features(const FeatureLayout& layout, std::uint64_t h, std::span<const TokenId> prefix,
                        std::size_t t) {
    if (t != prefix.size()) {
        throw InvalidInput("feature position must equal the prefix length");
    }
    const std::optional<TokenId> prev = prefix.empty() ? std::nullopt : std::optional<TokenId>(prefix.back());
    return {layout.bias(), layout.prev_token(prev), layout.position(t), layout.prompt(h), layout.cross(h, t)};
}

ActiveFeatures features(const PolicyParams& params, const TaskInstance& prompt, std::span<const TokenId> prefix,
                        std::size_t t) {
    return features(params.layout(), prompt_hash(prompt.prompt), prefix, t);
}

// ----------------------------- params -----------------------------

PolicyParams::PolicyParams(Vocabulary vocab, FeatureConfig config)
    : vocab_(std::move(vocab)), config_(config), layout_(config_, vocab_.size()),
      weights_(static_cast<std::size_t>(layout_.count()) * vocab_.size(), 0.0) {}

void PolicyParams::logits(const ActiveFeatures& active, std::span<double> out) const {
    const std::size_t v = vocab_.size();
    std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(v), 0.0);
    for (auto f : active) {
        const double* w = weights_.data() + static_cast<std::size_t>(f) * v;
        for (std::size_t k = 0; k < v; ++k) {
            out[k] += w[k];
        }
    }
}

// ----------------------------- gradient table -----------------------------

std::span<double> GradTable::row(std::uint32_t feature) {
    auto [it, inserted] = slot_.try_emplace(feature, features_.size());
    if (inserted) {
        features_.push_back(feature);
        values_.resize(values_.size() + vocab_size_, 0.0);
    }
    return {values_.data() + it->second * vocab_size_, vocab_size_};
}

double GradTable::at(std::uint32_t feature, std::size_t token) const {
    auto it = slot_.find(feature);
    return it == slot_.end() ? 0.0 : values_[it->second * vocab_size_ + token];
}

void GradTable::add(const ActiveFeatures& active, std::span<const double> delta) {
    for (auto f : active) {
        auto r = row(f);
        for (std::size_t k = 0; k < vocab_size_; ++k) {
            r[k] += delta[k];
        }
    }
}

void GradTable::merge(const GradTable& other, double scale) {
    for (std::size_t s = 0; s < other.features_.size(); ++s) {
        auto r = row(other.features_[s]);
        const double* src = other.values_.data() + s * vocab_size_;
        for (std::size_t k = 0; k < vocab_size_; ++k) {
            r[k] += scale * src[k];
        }
    }
}

void GradTable::scale(double factor) {
    for (auto& x : values_) {
        x *= factor;
    }
}

double GradTable::max_abs() const {
    double m = 0.0;
    for (double x : values_) {
        m = std::max(m, std::abs(x));
    }
    return m;
}

void apply_update(PolicyParams& params, const GradTable& grad, double scale) {
    const auto feats = grad.features();
    for (std::size_t s = 0; s < feats.size(); ++s) {
        auto dst = params.row(feats[s]);
        auto src = grad.row_at(s);
        for (std::size_t k = 0; k < dst.size(); ++k) {
            dst[k] += scale * src[k];
        }
    }
}

// ----------------------------- distributions -----------------------------

double detail::softmax(std::span<const double> z, double temperature, std::span<double> out) {
    const std::size_t v = z.size();
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < v; ++k) {
        mx = std::max(mx, z[k] / temperature);
    }
    double sum = 0.0;
    for (std::size_t k = 0; k < v; ++k) {
        out[k] = std::exp(z[k] / temperature - mx);
        sum += out[k];
    }
    for (std::size_t k = 0; k < v; ++k) {
        out[k] /= sum;
    }
    return mx + std::log(sum);
}

std::vector<double> next_token_dist(const PolicyParams& params, const TaskInstance& prompt,
                                    std::span<const TokenId> prefix, double temperature) {
    if (!(temperature > 0.0)) {
        throw InvalidInput("temperature must be positive");
    }
    const std::size_t v = params.vocab_size();
    std::array<double, kMaxVocab> z{};
    std::vector<double> p(v);
    params.logits(features(params, prompt, prefix, prefix.size()), z);
    detail::softmax(std::span<const double>(z.data(), v), temperature, p);
    return p;
}

RolloutGroup sample_group(const PolicyParams& params, const TaskInstance& prompt, std::size_t n, double temperature,
                          std::size_t max_length, std::uint64_t seed) {
    if (n < 2) {
        throw InvalidInput("a rollout group needs at least two candidates");
    }
    if (!(temperature > 0.0)) {
        throw InvalidInput("temperature must be positive");
    }
    const std::size_t v = params.vocab_size();
    const auto& layout = params.layout();
    const TokenId eos = params.vocab().eos();

    RolloutGroup group;
    group.prompt_id = prompt.id;
    group.prompt_hash = prompt_hash(prompt.prompt);
    group.temperature = temperature;
    group.candidates.resize(n);

    Rng rng(seed);
    std::array<double, kMaxVocab> z{};
    std::array<double, kMaxVocab> p{};
    const std::span<const double> zs(z.data(), v);
    for (auto& cand : group.candidates) {
        cand.tokens.reserve(max_length);
        cand.logprobs.reserve(max_length);
        for (std::size_t t = 0; t < max_length; ++t) {
            params.logits(features(layout, group.prompt_hash, cand.tokens, t), z);
            detail::softmax(zs, temperature, p);
            const double u = rng.uniform();
            std::size_t tok = v - 1;
            double acc = 0.0;
            for (std::size_t k = 0; k < v; ++k) {
                acc += p[k];
                if (u < acc) {
                    tok = k;
                    break;
                }
            }
            // temperature-1 log-prob of the sampled token
            double mx = z[0];
            for (std::size_t k = 1; k < v; ++k) {
                mx = std::max(mx, z[k]);
            }
            double sum = 0.0;
            for (std::size_t k = 0; k < v; ++k) {
                sum += std::exp(z[k] - mx);
            }
            cand.logprobs.push_back(z[tok] - mx - std::log(sum));
            cand.tokens.push_back(static_cast<TokenId>(tok));
            if (tok == eos) {
                break;
            }
        }
        cand.truncated = cand.tokens.empty() || cand.tokens.back() != eos;
    }
    return group;
}

Sequence greedy_decode(const PolicyParams& params, const TaskInstance& prompt, std::size_t max_length) {
    const std::size_t v = params.vocab_size();
    const auto h = prompt_hash(prompt.prompt);
    std::array<double, kMaxVocab> z{};
    Sequence seq;
    for (std::size_t t = 0; t < max_length; ++t) {
        params.logits(features(params.layout(), h, seq, t), z);
        // first maximal token wins ties
        const auto best = static_cast<TokenId>(std::max_element(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(v)) -
                                               z.begin());
        seq.push_back(best);
        if (best == params.vocab().eos()) {
            break;
        }
    }
    return seq;
}

namespace {

void check_tokens(const PolicyParams& params, std::span<const TokenId> seq) {
    for (auto t : seq) {
        if (t >= params.vocab_size()) {
            throw InvalidInput("token id " + std::to_string(t) + " is outside the vocabulary");
        }
    }
}

}  // namespace

LogProbGrad logprob_and_grad(const PolicyParams& params, std::uint64_t h, std::span<const TokenId> seq) {
    check_tokens(params, seq);
    const std::size_t v = params.vocab_size();
    LogProbGrad out{0.0, GradTable(v)};
    std::array<double, kMaxVocab> z{};
    std::array<double, kMaxVocab> p{};
    for (std::size_t t = 0; t < seq.size(); ++t) {
        const auto active = features(params.layout(), h, seq.first(t), t);
        params.logits(active, z);
        detail::softmax(std::span<const double>(z.data(), v), 1.0, p);
        out.logprob += std::log(p[seq[t]]);
        for (std::size_t k = 0; k < v; ++k) {
            p[k] = (k == seq[t] ? 1.0 : 0.0) - p[k];
        }
        out.grad.add(active, std::span<const double>(p.data(), v));
    }
    return out;
}

LogProbGrad logprob_and_grad(const PolicyParams& params, const TaskInstance& prompt, std::span<const TokenId> seq) {
    return logprob_and_grad(params, prompt_hash(prompt.prompt), seq);
}

double sequence_logprob(const PolicyParams& params, std::uint64_t h, std::span<const TokenId> seq) {
    check_tokens(params, seq);
    const std::size_t v = params.vocab_size();
    std::array<double, kMaxVocab> z{};
    std::array<double, kMaxVocab> p{};
    double lp = 0.0;
    for (std::size_t t = 0; t < seq.size(); ++t) {
        params.logits(features(params.layout(), h, seq.first(t), t), z);
        const double lse = detail::softmax(std::span<const double>(z.data(), v), 1.0, p);
        lp += z[seq[t]] - lse;
    }
    return lp;
}

double self_certainty(const PolicyParams& params, std::uint64_t h, std::span<const TokenId> seq) {
    if (seq.empty()) {
        throw InvalidInput("self-certainty needs a non-empty sequence");
    }
    check_tokens(params, seq);
    const std::size_t v = params.vocab_size();
    std::array<double, kMaxVocab> z{};
    std::array<double, kMaxVocab> p{};
    double total = 0.0;
    for (std::size_t t = 0; t < seq.size(); ++t) {
        params.logits(features(params.layout(), h, seq.first(t), t), z);
        const double lse = detail::softmax(std::span<const double>(z.data(), v), 1.0, p);
        // KL(U || p) = -log V - (1/V) sum_v log p(v)
        double mean_logp = 0.0;
        for (std::size_t k = 0; k < v; ++k) {
            mean_logp += z[k] - lse;
        }
        total += -std::log(static_cast<double>(v)) - mean_logp / static_cast<double>(v);
    }
    // Clamp rounding noise around the uniform case.
    return std::max(0.0, total / static_cast<double>(seq.size()));
}

double self_certainty(const PolicyParams& params, const TaskInstance& prompt, std::span<const TokenId> seq) {
    return self_certainty(params, prompt_hash(prompt.prompt), seq);
}

// ----------------------------- pretraining -----------------------------

LabeledExample make_labeled(const Vocabulary& vocab, const TaskInstance& instance) {
    if (!instance.gold_answer) {
        throw InvalidInput("instance '" + instance.id + "' has no gold answer to pretrain on");
    }
    return {prompt_hash(instance.prompt), vocab.encode_answer(*instance.gold_answer)};
}

double supervised_loss(const PolicyParams& params, std::span<const LabeledExample> data) {
    if (data.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (const auto& ex : data) {
        total -= sequence_logprob(params, ex.prompt_hash, ex.target);
    }
    return total / static_cast<double>(data.size());
}

PolicyParams pretrain(PolicyParams params, std::span<const LabeledExample> data, const PretrainOptions& options,
                      std::vector<double>* loss_log) {
    if (data.empty() || options.steps == 0) {
        return params;
    }
    Rng rng(options.seed);
    const bool full = options.batch_size == 0 || options.batch_size >= data.size();
    std::vector<std::size_t> batch;
    for (std::size_t step = 0; step < options.steps; ++step) {
        batch.clear();
        if (full) {
            for (std::size_t i = 0; i < data.size(); ++i) {
                batch.push_back(i);
            }
        } else {
            for (std::size_t i = 0; i < options.batch_size; ++i) {
                batch.push_back(rng.index(data.size()));
            }
        }
        GradTable grad(params.vocab_size());
        double loss = 0.0;
        for (auto i : batch) {
            auto lg = logprob_and_grad(params, data[i].prompt_hash, data[i].target);
            loss -= lg.logprob;
            grad.merge(lg.grad);
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        if (loss_log) {
            loss_log->push_back(loss * inv);
        }
        // ascent on log-likelihood
        apply_update(params, grad, options.lr * inv);
    }
    return params;
}

// ----------------------------- checkpoints -----------------------------

std::string checkpoint_to_json(const PolicyParams& params) {
    nlohmann::json head;
    head["version"] = params.version;
    head["seed"] = params.seed;
    head["vocabulary"] = params.vocab().tokens();
    head["feature_config"] = {{"hash_buckets", params.feature_config().hash_buckets},
                              {"position_buckets", params.feature_config().position_buckets}};
    head["shape"] = {params.feature_count(), params.vocab_size()};
    std::string out = head.dump();
    out.pop_back();  // reopen the object to append the weights
    out += ",\"weights\":[";
    char buf[32];
    bool first = true;
    for (double w : params.weights()) {
        const int n = std::snprintf(buf, sizeof buf, "%.17g", w);
        if (!first) {
            out += ',';
        }
        out.append(buf, static_cast<std::size_t>(n));
        first = false;
    }
    out += "]}\n";
    return out;
}

PolicyParams checkpoint_from_json(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("checkpoint is not valid JSON: ") + e.what());
    }
    try {
        auto vocab = Vocabulary::from_tokens(j.at("vocabulary").get<std::vector<std::string>>());
        FeatureConfig fc;
        fc.hash_buckets = j.at("feature_config").at("hash_buckets").get<std::uint32_t>();
        fc.position_buckets = j.at("feature_config").at("position_buckets").get<std::uint32_t>();
        PolicyParams params(std::move(vocab), fc);
        params.version = j.at("version").get<std::string>();
        params.seed = j.at("seed").get<std::uint64_t>();
        const auto& w = j.at("weights");
        if (w.size() != params.weights().size()) {
            throw InvalidInput("checkpoint weight count " + std::to_string(w.size()) + " does not match layout " +
                               std::to_string(params.weights().size()));
        }
        auto dst = params.weights();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            dst[i] = w[i].get<double>();
            if (!std::isfinite(dst[i])) {
                throw InvalidInput("checkpoint contains a non-finite weight");
            }
        }
        return params;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed checkpoint: ") + e.what());
    }
}

void write_checkpoint(const std::filesystem::path& path, const PolicyParams& params) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) {
            throw IoError("cannot write checkpoint " + tmp);
        }
        out << checkpoint_to_json(params);
        if (!out) {
            throw IoError("short write on checkpoint " + tmp);
        }
    }
    std::filesystem::rename(tmp, path);
}

PolicyParams read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read checkpoint " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return checkpoint_from_json(ss.str());
}

}  // namespace cuma
