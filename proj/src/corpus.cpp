#include "cuma/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "cuma/error.hpp"
#include "cuma/rng.hpp"

namespace cuma {

std::string_view to_string(Source s) {
    switch (s) {
        case Source::generated:
            return "generated";
        case Source::ingested:
            return "ingested";
        case Source::curated:
            return "curated";
    }
    return "generated";
}

std::optional<Source> parse_source(std::string_view s) {
    if (s == "generated") {
        return Source::generated;
    }
    if (s == "ingested") {
        return Source::ingested;
    }
    if (s == "curated") {
        return Source::curated;
    }
    return std::nullopt;
}

namespace {

void check_level(int level) {
    if (level < kMinLevel || level > kMaxLevel) {
        throw InvalidInput("difficulty level " + std::to_string(level) + " is outside 1..5");
    }
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) {
        s.remove_prefix(1);
    }
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) {
        s.remove_suffix(1);
    }
    return s;
}

struct Problem {
    std::string prompt;
    long long answer;
};

Problem make_problem(int level, Rng& rng) {
    auto pick = [&rng](int hi) { return rng.uniform_int(0, hi); };
    std::ostringstream s;
    long long ans = 0;
    switch (level) {
        case 1: {
            const auto a = pick(9), b = pick(9);
            s << a << '+' << b;
            ans = a + b;
            break;
        }
        case 2: {
            const auto a = pick(20), b = pick(20), c = pick(20);
            s << a << '+' << b << '-' << c;
            ans = a + b - c;
            break;
        }
        case 3: {
            const auto a = pick(12), b = pick(12), c = pick(50);
            s << a << '*' << b << '+' << c;
            ans = a * b + c;
            break;
        }
        case 4: {
            const auto a = pick(20), b = pick(20), c = pick(20), d = pick(20);
            s << '(' << a << '+' << b << ")*" << c << '-' << d;
            ans = (a + b) * c - d;
            break;
        }
        default: {
            const auto a = pick(30), b = pick(30), c = pick(30), d = pick(30), e = pick(30);
            s << a << '*' << b << '-' << c << '*' << d << '+' << e;
            ans = a * b - c * d + e;
            break;
        }
    }
    s << "=?";
    return {s.str(), ans};
}

}  // namespace

std::vector<TaskInstance> generate_corpus(int level, std::size_t count, std::uint64_t seed) {
    check_level(level);
    if (count == 0) {
        throw InvalidInput("corpus count must be at least 1");
    }
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(level)}));
    std::vector<TaskInstance> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        auto p = make_problem(level, rng);
        out.push_back({"g" + std::to_string(level) + "-" + std::to_string(seed) + "-" + std::to_string(i),
                       std::move(p.prompt), level, std::to_string(p.answer), Source::generated});
    }
    return out;
}

// ----------------------------- JSONL -----------------------------

namespace {

std::optional<TaskInstance> parse_line(std::string_view line) {
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        return std::nullopt;
    }
    auto id = j.find("id");
    auto prompt = j.find("prompt");
    if (id == j.end() || !id->is_string() || prompt == j.end() || !prompt->is_string() ||
        prompt->get<std::string>().empty()) {
        return std::nullopt;
    }
    TaskInstance t;
    t.id = id->get<std::string>();
    t.prompt = prompt->get<std::string>();
    t.source = Source::ingested;
    if (auto lv = j.find("level"); lv != j.end() && !lv->is_null()) {
        if (!lv->is_number_integer()) {
            return std::nullopt;
        }
        const int level = lv->get<int>();
        if (level < kMinLevel || level > kMaxLevel) {
            return std::nullopt;
        }
        t.level = level;
    }
    if (auto ans = j.find("answer"); ans != j.end() && !ans->is_null()) {
        if (ans->is_string()) {
            t.gold_answer = ans->get<std::string>();
        } else if (ans->is_number_integer()) {
            t.gold_answer = std::to_string(ans->get<long long>());
        } else {
            return std::nullopt;
        }
    }
    if (auto src = j.find("source"); src != j.end() && !src->is_null()) {
        auto s = src->is_string() ? parse_source(src->get<std::string>()) : std::nullopt;
        if (!s) {
            return std::nullopt;
        }
        t.source = *s;
    }
    return t;
}

}  // namespace

IngestResult parse_jsonl(std::string_view text) {
    IngestResult result;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        auto line = trim(text.substr(0, nl));
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (line.empty()) {
            continue;
        }
        if (auto t = parse_line(line)) {
            result.instances.push_back(std::move(*t));
        } else {
            ++result.skipped;
            std::cerr << "warning: skipping malformed corpus line " << line_no << '\n';
        }
    }
    return result;
}

IngestResult ingest_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read corpus file " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_jsonl(ss.str());
}

std::string to_jsonl_line(const TaskInstance& t) {
    nlohmann::ordered_json j;
    j["id"] = t.id;
    j["prompt"] = t.prompt;
    if (t.level) {
        j["level"] = *t.level;
    }
    if (t.gold_answer) {
        j["answer"] = *t.gold_answer;
    }
    j["source"] = std::string(to_string(t.source));
    return j.dump();
}

void write_jsonl(const std::filesystem::path& path, std::span<const TaskInstance> instances) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write corpus file " + path.string());
    }
    for (const auto& t : instances) {
        out << to_jsonl_line(t) << '\n';
    }
    if (!out) {
        throw IoError("short write on corpus file " + path.string());
    }
}

// ----------------------------- curation -----------------------------

CurationParse parse_curated_response(std::string_view text) {
    CurationParse result;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        auto line = trim(text.substr(0, nl));
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);

        if (line.starts_with("- ")) {
            line = trim(line.substr(2));
        }
        if (!line.starts_with("Level ")) {
            continue;
        }
        auto rest = line.substr(6);
        const auto semi = rest.find(';');
        if (semi == std::string_view::npos) {
            continue;
        }
        const auto level_tok = trim(rest.substr(0, semi));
        if (level_tok.empty() ||
            !std::all_of(level_tok.begin(), level_tok.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
            continue;
        }
        rest = trim(rest.substr(semi + 1));
        if (!rest.starts_with("Type:")) {
            continue;
        }
        rest = rest.substr(5);
        const auto semi2 = rest.find(';');
        if (semi2 == std::string_view::npos) {
            continue;
        }
        const auto topic = trim(rest.substr(0, semi2));
        const auto question = trim(rest.substr(semi2 + 1));
        if (topic.empty() || question.empty()) {
            continue;
        }
        const int level = level_tok.size() > 2 ? 0 : std::atoi(std::string(level_tok).c_str());
        if (level < kMinLevel || level > kMaxLevel) {
            ++result.skipped;
            continue;
        }
        result.questions.push_back({level, std::string(topic), std::string(question)});
    }
    return result;
}

ExamplePool example_pool_from(std::span<const TaskInstance> instances) {
    ExamplePool pool;
    for (const auto& t : instances) {
        if (t.level) {
            pool.by_level[static_cast<std::size_t>(*t.level - 1)].push_back(t.prompt);
        }
    }
    return pool;
}

namespace {

constexpr std::string_view kCurationTemplate =
    R"(You are a math reasoning question generator for LLM training. Generate few high-quality reasoning questions that should be self-contained, promote step-by-step thinking, and not require external knowledge beyond basic facts.
Here are the texts:

Key requirements:
- Do not provide answers, solutions, or reasoning chains. Output only the questions with their difficulty labels.
- Vary the questions to cover different sub-topics, including but not limited to ('Algebra', 'Counting & Probability', 'Geometry', 'Intermediate Algebra', 'Number Theory', 'Prealgebra', 'Precalculus').
- Ensure questions are original and engaging.
- Include a difficulty level for each question on a scale of 1-5 (1: very easy, basic logic; 5: very hard, multi-step or abstract reasoning).
- Target difficulty level: {target_level}.
- Examples of level 1 questions: {level_1_examples}
- Examples of level 2 questions: {level_2_examples}
- Examples of level 3 questions: {level_3_examples}
- Examples of level 4 questions: {level_4_examples}
- Examples of level 5 questions: {level_5_examples}

The examples above are for illustration only, and to distinguish between different difficulty levels. Your generated questions must be different from these examples.

Output format:
- Level {target_level}; Type: [Sub-topic]; [Question text]
- Level {target_level}; Type: [Sub-topic]; [Question text]
... (repeat for {N} questions)

Generate exactly {N} questions of Level {target_level}.
)";

void replace_all(std::string& s, std::string_view from, std::string_view to) {
    for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
        s.replace(pos, from.size(), to);
    }
}

std::string format_examples(const std::vector<std::string>& pool, std::size_t k, Rng& rng) {
    // draw without replacement (partial Fisher-Yates over indices)
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = i;
    }
    const std::size_t take = std::min(k, idx.size());
    std::string out;
    for (std::size_t i = 0; i < take; ++i) {
        std::swap(idx[i], idx[i + rng.index(idx.size() - i)]);
        if (i > 0) {
            out += ", ";
        }
        out += '"' + pool[idx[i]] + '"';
    }
    return out;
}

}  // namespace

std::string render_curation_prompt(int target_level, std::size_t batch_size, const ExamplePool& pool,
                                   std::size_t examples_per_level, std::uint64_t seed) {
    check_level(target_level);
    if (batch_size == 0) {
        throw InvalidInput("curation batch size must be positive");
    }
    for (int l = kMinLevel; l <= kMaxLevel; ++l) {
        if (pool.by_level.size() < static_cast<std::size_t>(l) || pool.by_level[static_cast<std::size_t>(l - 1)].empty()) {
            throw InvalidInput("example pool has no level " + std::to_string(l) + " examples");
        }
    }
    Rng rng(derive_seed(seed, {0xC0FFEEULL, static_cast<std::uint64_t>(target_level)}));
    std::string prompt(kCurationTemplate);
    for (int l = kMinLevel; l <= kMaxLevel; ++l) {
        const auto examples = format_examples(pool.by_level[static_cast<std::size_t>(l - 1)], examples_per_level, rng);
        replace_all(prompt, "{level_" + std::to_string(l) + "_examples}", examples);
    }
    replace_all(prompt, "{target_level}", std::to_string(target_level));
    replace_all(prompt, "{N}", std::to_string(batch_size));
    return prompt;
}

namespace {

struct ParsedUrl {
    std::string base;  // scheme://host[:port]
    std::string path;
};

ParsedUrl split_url(const std::string& url) {
    const auto scheme = url.find("://");
    if (scheme == std::string::npos) {
        throw InvalidInput("endpoint must be an absolute http(s) URL: " + url);
    }
    const auto slash = url.find('/', scheme + 3);
    if (slash == std::string::npos) {
        return {url, "/"};
    }
    return {url.substr(0, slash), url.substr(slash)};
}

// Completion APIs answer either with plain text or a JSON envelope.
std::string completion_text(const std::string& body) {
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        return body;
    }
    for (const char* key : {"text", "completion", "output"}) {
        if (auto it = j.find(key); it != j.end() && it->is_string()) {
            return it->get<std::string>();
        }
    }
    if (auto it = j.find("choices"); it != j.end() && it->is_array() && !it->empty()) {
        const auto& c = it->front();
        if (auto t = c.find("text"); t != c.end() && t->is_string()) {
            return t->get<std::string>();
        }
        if (auto m = c.find("message"); m != c.end() && m->is_object()) {
            if (auto t = m->find("content"); t != m->end() && t->is_string()) {
                return t->get<std::string>();
            }
        }
    }
    return body;
}

}  // namespace

CurationResult curate_via_endpoint(const CurationRequest& request, const ExamplePool& pool) {
    CurationResult result;
    result.prompt = render_curation_prompt(request.target_level, request.batch_size, pool, request.examples_per_level,
                                           request.seed);

    const auto url = split_url(request.endpoint);
    httplib::Client client(url.base);
    client.set_connection_timeout(request.timeout);
    client.set_read_timeout(request.timeout);
    httplib::Headers headers;
    std::optional<std::string> token = request.api_token;
    if (!token) {
        if (const char* env = std::getenv("CUMA_API_TOKEN")) {
            token = env;
        }
    }
    if (token && !token->empty()) {
        headers.emplace("Authorization", "Bearer " + *token);
    }

    auto backoff = request.initial_backoff;
    std::string last_error;
    int last_status = 0;
    for (int attempt = 0; attempt <= request.max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(backoff);
            backoff *= 2;
        }
        auto res = client.Post(url.path, headers, result.prompt, "text/plain");
        if (!res) {
            last_error = "transport failure: " + httplib::to_string(res.error());
            last_status = 0;
            continue;
        }
        if (res->status < 200 || res->status >= 300) {
            last_error = "endpoint returned HTTP " + std::to_string(res->status);
            last_status = res->status;
            continue;
        }
        result.raw_reply = completion_text(res->body);
        result.parsed = parse_curated_response(result.raw_reply);
        if (result.parsed.questions.empty()) {
            std::cerr << "warning: curation reply contained no well-formed questions\n";
        }
        return result;
    }
    throw TransportError(last_error + " after " + std::to_string(request.max_retries) + " retries", last_status);
}

std::vector<TaskInstance> curated_to_instances(std::span<const CuratedQuestion> questions, std::uint64_t seed) {
    std::vector<TaskInstance> out;
    out.reserve(questions.size());
    for (std::size_t i = 0; i < questions.size(); ++i) {
        const auto& q = questions[i];
        // curated questions are unlabeled by construction
        out.push_back({"c" + std::to_string(q.level) + "-" + std::to_string(seed) + "-" + std::to_string(i), q.text,
                       q.level, std::nullopt, Source::curated});
    }
    return out;
}

std::vector<DifficultyBin> partition_bins(std::span<const TaskInstance> instances) {
    std::vector<DifficultyBin> bins(kNumLevels);
    for (int l = kMinLevel; l <= kMaxLevel; ++l) {
        bins[static_cast<std::size_t>(l - 1)].level = l;
    }
    for (const auto& t : instances) {
        if (!t.level) {
            throw InvalidInput("instance '" + t.id + "' has no difficulty level; estimate it before binning");
        }
        check_level(*t.level);
        bins[static_cast<std::size_t>(*t.level - 1)].instances.push_back(t);
    }
    return bins;
}

}  // namespace cuma
