#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cuma/corpus.hpp"
#include "cuma/curriculum.hpp"
#include "cuma/error.hpp"
#include "cuma/grpo.hpp"
#include "cuma/harness.hpp"
#include "cuma/kernels.hpp"
#include "cuma/rng.hpp"

namespace fs = std::filesystem;
using namespace cuma;

namespace {

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string strategy;
    std::vector<std::string> ablations;
    std::string out_dir;
    std::string base_checkpoint;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config, "key = value config file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", f.seed, "root seed");
    cmd->add_option("--strategy", f.strategy, "verifier | ttrl | intuitor | cuma");
    cmd->add_option("--ablation", f.ablations, "no-mask | no-curriculum | no-curated-data (repeatable)");
    cmd->add_option("--base-checkpoint", f.base_checkpoint, "start from this checkpoint instead of the preset");
    cmd->add_option("--set", f.overrides, "extra key=value override (repeatable)");
}

ExperimentConfig resolve_config(const CommonFlags& f) {
    ExperimentConfig cfg = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
    for (const auto& kv : f.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(kv, "override must be key=value");
        }
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (f.seed) {
        cfg.seed = *f.seed;
    }
    if (!f.strategy.empty()) {
        cfg.set("strategy", f.strategy);
    }
    for (const auto& a : f.ablations) {
        cfg.ablations.enable(a);
    }
    if (!f.base_checkpoint.empty()) {
        cfg.base_checkpoint = f.base_checkpoint;
    }
    cfg.validate();
    return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << text;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cuma: curriculum-masked label-free RL on a synthetic arithmetic corpus"};
    app.require_subcommand(1);

    // generate-corpus
    auto* gen = app.add_subcommand("generate-corpus", "write a generated corpus as JSONL");
    std::vector<int> gen_levels{1, 2, 3, 4, 5};
    std::size_t gen_count = 40;
    std::uint64_t gen_seed = 7;
    std::string gen_out;
    gen->add_option("--level", gen_levels, "levels to generate (repeatable)")->check(CLI::Range(1, 5));
    gen->add_option("--count", gen_count, "instances per level");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--out", gen_out, "output JSONL")->required();

    // curate
    auto* cur = app.add_subcommand("curate", "ask a completion endpoint for new questions at one level");
    std::string cur_endpoint, cur_examples, cur_out;
    int cur_level = 1;
    std::size_t cur_batch = kDefaultCurationBatch;
    std::size_t cur_k = 2;
    std::uint64_t cur_seed = 0;
    bool cur_print_prompt = false;
    cur->add_option("--endpoint", cur_endpoint, "URL accepting the prompt as a text/plain POST")->required();
    cur->add_option("--level", cur_level, "target level")->check(CLI::Range(1, 5));
    cur->add_option("--batch", cur_batch, "questions requested");
    cur->add_option("--examples", cur_examples, "JSONL corpus supplying per-level examples")->required();
    cur->add_option("--examples-per-level", cur_k, "examples shown per level");
    cur->add_option("--seed", cur_seed, "example-draw seed");
    cur->add_option("--out", cur_out, "output JSONL")->required();
    cur->add_flag("--print-prompt", cur_print_prompt, "echo the rendered prompt to stderr");

    // estimate-difficulty
    auto* est = app.add_subcommand("estimate-difficulty", "assign levels from base-policy consensus rate");
    CommonFlags est_flags;
    std::string est_corpus, est_out;
    add_common(est, est_flags);
    est->add_option("--corpus", est_corpus, "input JSONL")->required();
    est->add_option("--out", est_out, "output JSONL with levels")->required();

    // train
    auto* train = app.add_subcommand("train", "run one experiment");
    CommonFlags train_flags;
    add_common(train, train_flags);
    train->add_option("--out-dir", train_flags.out_dir, "run directory")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a gold-labelled corpus");
    CommonFlags ev_flags;
    std::string ev_checkpoint, ev_corpus;
    add_common(ev, ev_flags);
    ev->add_option("--checkpoint", ev_checkpoint, "checkpoint JSON (defaults to the configured base)");
    ev->add_option("--corpus", ev_corpus, "eval JSONL (defaults to the configured eval corpus)");

    // sweep-difficulty
    auto* sw = app.add_subcommand("sweep-difficulty", "TTRL over cumulative level ranges");
    CommonFlags sw_flags;
    std::vector<std::string> sw_ranges{"1..2", "1..3", "1..4", "1..5"};
    add_common(sw, sw_flags);
    sw->add_option("--range", sw_ranges, "level range like 1..3 (repeatable)");
    sw->add_option("--out-dir", sw_flags.out_dir, "directory for per-range runs and sweep.csv");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the surrogate gradient");
    std::size_t gc_cases = 100;
    std::uint64_t gc_seed = 1;
    gc->add_option("--cases", gc_cases, "random configurations");
    gc->add_option("--seed", gc_seed, "seed");

    // plot-data
    auto* pd = app.add_subcommand("plot-data", "long-format CSV from metrics.csv files");
    std::vector<std::string> pd_files, pd_metrics;
    std::string pd_out;
    pd->add_option("files", pd_files, "metrics.csv files")->required()->check(CLI::ExistingFile);
    pd->add_option("--metric", pd_metrics, "metric column (repeatable)");
    pd->add_option("--out", pd_out, "output CSV (stdout when omitted)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            std::vector<TaskInstance> all;
            for (int level : gen_levels) {
                auto part = generate_corpus(level, gen_count, gen_seed);
                all.insert(all.end(), part.begin(), part.end());
            }
            write_jsonl(gen_out, all);
            std::cout << "wrote " << all.size() << " instances to " << gen_out << '\n';
        } else if (*cur) {
            const auto examples = ingest_jsonl(cur_examples);
            const auto pool = example_pool_from(examples.instances);
            CurationRequest req;
            req.endpoint = cur_endpoint;
            req.target_level = cur_level;
            req.batch_size = cur_batch;
            req.examples_per_level = cur_k;
            req.seed = cur_seed;
            const auto res = curate_via_endpoint(req, pool);
            if (cur_print_prompt) {
                std::cerr << res.prompt << '\n';
            }
            const auto inst = curated_to_instances(res.parsed.questions, cur_seed);
            write_jsonl(cur_out, inst);
            std::cout << "parsed " << res.parsed.questions.size() << " questions (" << res.parsed.skipped
                      << " with out-of-range levels) into " << cur_out << '\n';
        } else if (*est) {
            const auto cfg = resolve_config(est_flags);
            set_num_threads(cfg.threads);
            const auto base = build_base(cfg);
            auto in = ingest_jsonl(est_corpus).instances;
            std::array<std::size_t, kNumLevels> counts{};
            for (auto& t : in) {
                t.level = estimate_difficulty(base, t, cfg.train.candidates, cfg.train.temperature,
                                              cfg.difficulty_trials, derive_seed(cfg.seed, {0xD1FFULL, prompt_hash(t.id)}),
                                              cfg.train.max_length, cfg.thresholds);
                ++counts[static_cast<std::size_t>(*t.level - 1)];
            }
            write_jsonl(est_out, in);
            for (std::size_t l = 0; l < counts.size(); ++l) {
                std::cout << "level " << l + 1 << ": " << counts[l] << '\n';
            }
        } else if (*train) {
            return run_experiment(resolve_config(train_flags), train_flags.out_dir);
        } else if (*ev) {
            auto cfg = resolve_config(ev_flags);
            set_num_threads(cfg.threads);
            if (!ev_corpus.empty()) {
                cfg.eval_corpus = ev_corpus;
            }
            const auto params = ev_checkpoint.empty() ? build_base(cfg) : read_checkpoint(ev_checkpoint);
            std::vector<TaskInstance> corpus;
            if (!cfg.eval_corpus.empty()) {
                corpus = ingest_jsonl(cfg.eval_corpus).instances;
            } else {
                for (int level : cfg.eval_levels) {
                    auto part = generate_corpus(level, cfg.eval_per_level, cfg.eval_seed);
                    corpus.insert(corpus.end(), part.begin(), part.end());
                }
            }
            const auto rep = evaluate(params, corpus, cfg.eval_samples, cfg.train.temperature, cfg.train.max_length,
                                      derive_seed(cfg.seed, {0xE7A15EEDULL}));
            std::cout << rep.table();
        } else if (*sw) {
            const auto cfg = resolve_config(sw_flags);
            std::vector<LevelRange> ranges;
            for (const auto& r : sw_ranges) {
                ranges.push_back(parse_range(r));
            }
            std::optional<fs::path> dir;
            if (!sw_flags.out_dir.empty()) {
                dir = sw_flags.out_dir;
            }
            std::cout << sweep_table(sweep_difficulty(cfg, ranges, dir));
        } else if (*gc) {
            const auto rep = gradcheck(gc_seed, gc_cases);
            std::cout << rep.summary() << '\n';
            return rep.passed ? 0 : 1;
        } else if (*pd) {
            std::vector<fs::path> files(pd_files.begin(), pd_files.end());
            const auto text = emit_plots_data(files, pd_metrics);
            if (pd_out.empty()) {
                std::cout << text;
            } else {
                write_file(pd_out, text);
            }
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const TransportError& e) {
        std::cerr << "transport error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
