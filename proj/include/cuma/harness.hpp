#pragma once

// Experiment orchestration: configuration, base-model presets, the training
// loop (curriculum -> rollouts -> reward strategy -> GRPO step), evaluation,
// metrics/manifest files, the difficulty sweep and plotting data.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cuma/corpus.hpp"
#include "cuma/curriculum.hpp"
#include "cuma/grpo.hpp"
#include "cuma/kernels.hpp"
#include "cuma/policy.hpp"
#include "cuma/rewards.hpp"

namespace cuma {

struct Ablations {
    bool no_mask = false;
    bool no_curriculum = false;
    bool no_curated_data = false;

    // Accepts "no-mask", "no-curriculum", "no-curated-data".
    void enable(std::string_view name);
    std::vector<std::string> names() const;
};

enum class BasePreset { none, weak, strong };
enum class EvalMetric { sampled, greedy, majority };

std::string_view to_string(BasePreset p);
std::string_view to_string(EvalMetric m);

struct ExperimentConfig {
    std::uint64_t seed = 17;
    RewardStrategy strategy = RewardStrategy::cuma;
    TrainConfig train;
    int ttrl_mode_min_count = 1;
    FeatureConfig features;

    BasePreset base_preset = BasePreset::weak;
    std::string base_checkpoint;
    double pretrain_lr = 0.5;
    std::size_t pretrain_steps = 0;  // 0 = preset default
    std::size_t pretrain_per_level = 100;
    std::size_t pretrain_batch = 0;
    std::uint64_t pretrain_seed = 1001;

    std::vector<int> train_levels{1, 2, 3, 4, 5};
    std::size_t train_per_level = 40;
    std::uint64_t train_seed = 7;
    std::vector<std::string> ingest;
    std::vector<std::string> curated;

    bool curriculum = true;
    std::optional<StepsPerBin> steps_per_bin;

    std::vector<int> eval_levels{1, 2, 3, 4, 5};
    std::size_t eval_per_level = 40;
    std::uint64_t eval_seed = 7;
    std::string eval_corpus;
    std::size_t eval_every = 10;
    std::size_t eval_samples = 16;
    EvalMetric eval_metric = EvalMetric::sampled;

    std::size_t checkpoint_every = 50;
    int threads = 0;
    std::size_t difficulty_trials = 4;
    DifficultyThresholds thresholds;
    Ablations ablations;

    // Directory that relative paths inside the config file resolve against.
    std::filesystem::path base_dir;

    /// One recognised key; throws ConfigError naming an unknown key or bad value.
    void set(const std::string& key, const std::string& value);
    std::map<std::string, std::string> to_key_values() const;
    void validate() const;
};

ExperimentConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);
std::string render_config(const ExperimentConfig& config);

struct LevelAccuracy {
    std::size_t count = 0;
    double greedy = 0.0;
    double majority = 0.0;
    double sampled = 0.0;
};

struct EvalReport {
    std::size_t count = 0;
    double greedy = 0.0;    // greedy-decode accuracy
    double majority = 0.0;  // maj@N
    double sampled = 0.0;   // mean per-sample accuracy over the N samples
    std::array<LevelAccuracy, kNumLevels> per_level{};

    double metric(EvalMetric m) const;
    std::string table() const;
};

/// Requires a gold answer on every instance.
EvalReport evaluate(const PolicyParams& params, std::span<const TaskInstance> corpus, std::size_t n,
                    double temperature, std::size_t max_length, std::uint64_t seed, Exec exec = Exec::parallel);

struct MetricsRecord {
    std::size_t step = 0;
    int phase_level = kPooledLevel;
    double mean_reward = 0.0;
    double masked_fraction = 0.0;
    double consensus_rate = 0.0;
    std::vector<std::size_t> correct_histogram;  // index = number of correct candidates
    std::optional<double> eval_accuracy;
    double mean_response_length = 0.0;
    double self_certainty = 0.0;
    double kl_ref = 0.0;
    double lr = 0.0;
    // not part of metrics.csv
    double no_consensus_fraction = 0.0;
};

std::string metrics_header(std::size_t candidates);
std::string metrics_row(const MetricsRecord& r);

/// Gold-based count of groups by number of correct candidates. Diagnostic only:
/// its output never reaches the reward path.
std::vector<std::size_t> correct_rollout_histogram(const Vocabulary& vocab, std::span<const RolloutGroup> groups,
                                                   std::span<const TaskInstance> batch, std::size_t candidates);

struct ExperimentInputs {
    std::vector<TaskInstance> train;
    std::vector<TaskInstance> eval;
    PolicyParams base;
};

/// Builds the base policy (preset or checkpoint) and both corpora.
ExperimentInputs prepare_inputs(const ExperimentConfig& config);
PolicyParams build_base(const ExperimentConfig& config);
std::vector<LabeledExample> preset_pretrain_data(const ExperimentConfig& config, const Vocabulary& vocab);

struct RunResult {
    std::vector<MetricsRecord> records;
    double base_accuracy = 0.0;
    double final_accuracy = 0.0;
    EvalReport base_eval;
    EvalReport final_eval;
    PolicyParams final_params;
    std::string schedule_summary;
};

/// Training loop over prepared inputs. When out_dir is set it receives metrics.csv,
/// manifest.json, corpora and checkpoints.
RunResult run_training(const ExperimentConfig& config, ExperimentInputs inputs,
                       const std::optional<std::filesystem::path>& out_dir);

/// prepare_inputs + run_training; returns a process exit status.
int run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir);

std::string corpus_digest(std::span<const TaskInstance> instances);
std::string file_digest(const std::filesystem::path& path);
/// Recomputes every digest listed in out_dir/manifest.json. Returns mismatching entries.
std::vector<std::string> validate_manifest(const std::filesystem::path& out_dir);

struct LevelRange {
    int lo = 1;
    int hi = 5;
    std::string label() const;
};

LevelRange parse_range(std::string_view text);

struct SweepRow {
    LevelRange range;
    double base_accuracy = 0.0;
    double final_accuracy = 0.0;
    double masked_fraction_step0 = 0.0;
    double no_consensus_step0 = 0.0;
};

/// One TTRL run per cumulative range, pooled over the range's levels, evaluated on
/// the config's eval corpus.
std::vector<SweepRow> sweep_difficulty(const ExperimentConfig& config, std::span<const LevelRange> ranges,
                                       const std::optional<std::filesystem::path>& out_dir = std::nullopt);
std::string sweep_table(std::span<const SweepRow> rows);

/// Long-format (run_id, step, metric, value) rows for the selected metrics.
/// An empty selection yields the header only.
std::string emit_plots_data(std::span<const std::filesystem::path> metrics_files,
                            std::span<const std::string> metrics);
std::vector<std::string> metric_columns(const std::filesystem::path& metrics_file);

}  // namespace cuma
