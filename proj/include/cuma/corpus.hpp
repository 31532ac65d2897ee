#pragma once

// Unlabeled training corpora: synthetic generators, JSONL ingestion,
// the difficulty-curation endpoint client, and difficulty binning.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cuma {

inline constexpr int kMinLevel = 1;
inline constexpr int kMaxLevel = 5;
inline constexpr int kNumLevels = 5;

enum class Source { generated, ingested, curated };

std::string_view to_string(Source s);
std::optional<Source> parse_source(std::string_view s);

struct TaskInstance {
    std::string id;
    std::string prompt;
    std::optional<int> level;
    // Evaluation-only. Label-free training paths never read this field.
    std::optional<std::string> gold_answer;
    Source source = Source::generated;

    bool operator==(const TaskInstance&) const = default;
};

struct DifficultyBin {
    int level = kMinLevel;
    std::vector<TaskInstance> instances;
};

struct CuratedQuestion {
    int level = kMinLevel;
    std::string topic;
    std::string text;

    bool operator==(const CuratedQuestion&) const = default;
};

/// Deterministic arithmetic problems at one difficulty level.
///
/// Level templates (operands are non-negative integers):
///   1: a+b          a, b <= 9
///   2: a+b-c        a, b, c <= 20
///   3: a*b+c        a, b <= 12, c <= 50
///   4: (a+b)*c-d    a, b, c, d <= 20
///   5: a*b-c*d+e    all <= 30
/// Prompts read like "2+3=?"; gold answers are exact (possibly negative) integers.
std::vector<TaskInstance> generate_corpus(int level, std::size_t count, std::uint64_t seed);

struct IngestResult {
    std::vector<TaskInstance> instances;
    std::size_t skipped = 0;
};

/// Reads a corpus file. Malformed lines are skipped and counted, never fatal.
IngestResult ingest_jsonl(const std::filesystem::path& path);
IngestResult parse_jsonl(std::string_view text);

void write_jsonl(const std::filesystem::path& path, std::span<const TaskInstance> instances);
std::string to_jsonl_line(const TaskInstance& instance);

struct CurationParse {
    std::vector<CuratedQuestion> questions;
    std::size_t skipped = 0;  // lines that matched the grammar but carried a bad level
};

CurationParse parse_curated_response(std::string_view text);

// Per-level example questions used to fill the curation prompt.
struct ExamplePool {
    std::vector<std::vector<std::string>> by_level = std::vector<std::vector<std::string>>(kNumLevels);
};

ExamplePool example_pool_from(std::span<const TaskInstance> instances);

inline constexpr std::size_t kDefaultCurationBatch = 25;

struct CurationRequest {
    std::string endpoint;
    int target_level = kMinLevel;
    std::size_t batch_size = kDefaultCurationBatch;
    std::size_t examples_per_level = 2;
    std::uint64_t seed = 0;
    std::optional<std::string> api_token;  // defaults to $CUMA_API_TOKEN
    int max_retries = 3;
    std::chrono::milliseconds initial_backoff{200};
    std::chrono::seconds timeout{60};
};

/// Renders the curation prompt with freshly drawn examples per level.
std::string render_curation_prompt(int target_level, std::size_t batch_size, const ExamplePool& pool,
                                   std::size_t examples_per_level, std::uint64_t seed);

struct CurationResult {
    std::string prompt;
    std::string raw_reply;
    CurationParse parsed;
};

/// POSTs the rendered prompt as text/plain and parses the completion.
/// Throws TransportError once retries are exhausted.
CurationResult curate_via_endpoint(const CurationRequest& request, const ExamplePool& pool);

std::vector<TaskInstance> curated_to_instances(std::span<const CuratedQuestion> questions, std::uint64_t seed);

/// Routes instances into five bins by level, preserving order within a bin.
std::vector<DifficultyBin> partition_bins(std::span<const TaskInstance> instances);

}  // namespace cuma
