// ohf: command-line front end for the OH-Former re-identification stack.
//
// Subcommands: synth (build a synthetic labeled dataset), train (run or
// resume the training loop), eval (retrieval metrics for a checkpoint),
// analyze (cross-order attention similarity + score-cost report), and
// gradcheck (finite-difference verification of the differentiable kernels).
//
// Exit codes, stable for scripting:
//   0 success · 2 usage/config/contract · 3 output I/O
//   4 input data/format · 5 numeric failure

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ohf/checkpoint.hpp"
#include "ohf/config.hpp"
#include "ohf/data.hpp"
#include "ohf/gradcheck_suite.hpp"
#include "ohf/metrics.hpp"
#include "ohf/model.hpp"
#include "ohf/parallel.hpp"
#include "ohf/synth.hpp"
#include "ohf/trainer.hpp"

namespace {

int exit_code_for(ohf::ErrorKind kind) {
  switch (kind) {
    case ohf::ErrorKind::Io:
      return 3;
    case ohf::ErrorKind::Data:
    case ohf::ErrorKind::Format:
      return 4;
    case ohf::ErrorKind::Numeric:
      return 5;
    default:  // Config, Parse, Contract, Dimension: the caller asked for something wrong
      return 2;
  }
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) ohf::fail_config("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Applies `--key value` overrides on top of the config file text: an existing
// assignment to the key is replaced in place, a new key is appended. The
// merged text then goes through the normal parser, so unknown keys and
// malformed values fail exactly like they would in the file itself.
std::string apply_overrides(const std::string& text, const std::vector<std::pair<std::string, std::string>>& kv) {
  std::vector<std::string> lines;
  std::string cur;
  std::istringstream in(text);
  while (std::getline(in, cur)) lines.push_back(cur);

  auto key_of = [](const std::string& line) -> std::string {
    const std::string stripped = line.substr(0, line.find('#'));
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos) return "";
    std::size_t b = 0, e = eq;
    while (b < e && std::isspace(static_cast<unsigned char>(stripped[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(stripped[e - 1]))) --e;
    return stripped.substr(b, e - b);
  };

  for (const auto& [key, value] : kv) {
    bool replaced = false;
    for (auto& line : lines) {
      if (key_of(line) == key) {
        line = key + " = " + value;
        replaced = true;
        break;
      }
    }
    if (!replaced) lines.push_back(key + " = " + value);
  }
  std::string out;
  for (const auto& line : lines) out += line + "\n";
  return out;
}

// Turns the unparsed remainder of the train command line into key/value
// pairs; anything that is not a `--key value` sequence is a usage error.
std::vector<std::pair<std::string, std::string>> parse_override_args(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> kv;
  for (std::size_t i = 0; i < extras.size(); i += 2) {
    const std::string& flag = extras[i];
    if (flag.size() <= 2 || flag.rfind("--", 0) != 0)
      ohf::fail_config("config overrides must look like '--key value', got '" + flag + "'");
    if (i + 1 >= extras.size()) ohf::fail_config("override '" + flag + "' is missing a value");
    kv.emplace_back(flag.substr(2), extras[i + 1]);
  }
  return kv;
}

int run_synth(const std::string& out, int ids, int cams, int per_id, int height, int width, double occlude,
              std::uint64_t seed) {
  ohf::SynthSpec spec;
  spec.ids = ids;
  spec.cams = cams;
  spec.per_id = per_id;
  spec.height = height;
  spec.width = width;
  spec.occlude_p = occlude;
  spec.seed = seed;
  const int n = ohf::synth_generate(spec, out);
  std::printf("generated %d images in %s\n", n, out.c_str());
  return 0;
}

int run_train(const std::string& config_path, const std::string& data_dir, const std::string& resume,
              const std::string& run_dir, const std::vector<std::string>& extras) {
  const auto overrides = parse_override_args(extras);
  const auto cfg = ohf::parse_train_config(apply_overrides(read_text_file(config_path), overrides));
  const auto ds = ohf::load_dataset(data_dir);
  std::error_code ec;
  std::filesystem::create_directories(run_dir, ec);
  if (ec) ohf::fail_io("cannot create run directory '" + run_dir + "': " + ec.message());
  const auto result = ohf::train_run(cfg, ds, run_dir, resume);
  std::printf("trained %llu steps; final checkpoint %s\n", static_cast<unsigned long long>(result.steps_run),
              result.final_checkpoint.c_str());
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& query_dir, const std::string& gallery_dir,
             const std::string& out_path) {
  auto restored = ohf::restore_checkpoint(ohf::load_checkpoint(ckpt));
  const auto query = ohf::load_dataset(query_dir);
  const auto gallery = ohf::load_dataset(gallery_dir);
  for (const auto* ds : {&query, &gallery})
    if (ds->height != restored.config.input_h || ds->width != restored.config.input_w)
      ohf::fail_config("checkpoint expects " + std::to_string(restored.config.input_h) + "x" +
                       std::to_string(restored.config.input_w) + " images but the dataset holds " +
                       std::to_string(ds->height) + "x" + std::to_string(ds->width));

  const auto q = ohf::embed_dataset(query, restored.model, restored.config);
  const auto g = ohf::embed_dataset(gallery, restored.model, restored.config);
  const auto dist = ohf::dist_matrix(q.embeddings, g.embeddings);
  const auto r = ohf::cmc_map(dist, q.pids, q.cams, g.pids, g.cams);
  std::printf("mAP=%.4f R1=%.4f R5=%.4f R10=%.4f\n", r.mean_ap, r.rank(1), r.rank(5), r.rank(10));
  ohf::write_metrics_tsv(out_path, r);
  return 0;
}

int run_analyze(const std::string& ckpt, const std::string& data_dir, const std::string& direction, bool per_head,
                const std::string& out_dir) {
  auto restored = ohf::restore_checkpoint(ohf::load_checkpoint(ckpt));
  const auto flops = ohf::flops_report(restored.config);
  if (flops.empty())
    ohf::fail_config("the checkpoint's architecture has no attention order above 1; nothing to analyze");

  const auto ds = ohf::load_dataset(data_dir);
  if (ds.height != restored.config.input_h || ds.width != restored.config.input_w)
    ohf::fail_config("checkpoint expects " + std::to_string(restored.config.input_h) + "x" +
                     std::to_string(restored.config.input_w) + " images but the dataset holds " +
                     std::to_string(ds.height) + "x" + std::to_string(ds.width));

  // Attention maps come from one representative forward pass: the first
  // manifest image, unaugmented.
  ohf::NoGradGuard ng;
  ohf::Rng scratch(0);
  const auto batch = ohf::make_batch(ds, {0}, scratch, nullptr);
  std::vector<ohf::AttentionRecord<float>> records;
  ohf::forward(batch, restored.model, restored.config, &records, nullptr);

  std::map<int, std::vector<ohf::AttentionRecord<float>>> by_layer;
  for (const auto& rec : records) by_layer[rec.layer].push_back(rec);

  std::vector<ohf::PoolDirection> directions;
  if (direction.empty() || direction == "down") directions.push_back(ohf::PoolDirection::Down);
  if (direction.empty() || direction == "up") directions.push_back(ohf::PoolDirection::Up);

  const auto [grid_h, grid_w] = ohf::stem_grid(restored.config.input_h, restored.config.input_w);
  std::vector<ohf::SimilarityReport> reports;
  for (const auto& [layer, recs] : by_layer) {
    bool has_high_order = false;
    for (const auto& rec : recs) has_high_order |= rec.order > 1;
    if (!has_high_order) continue;
    for (auto dir : directions) reports.push_back(ohf::attention_similarity_report(recs, grid_h, grid_w, dir));
  }

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) ohf::fail_io("cannot create output directory '" + out_dir + "': " + ec.message());
  const std::string analysis_path = out_dir + "/analysis.tsv";
  const std::string flops_path = out_dir + "/flops.tsv";
  ohf::write_analysis_tsv(analysis_path, reports, per_head);
  ohf::write_flops_tsv(flops_path, flops);
  std::printf("wrote %s (%zu sections) and %s (%zu rows)\n", analysis_path.c_str(), reports.size(),
              flops_path.c_str(), flops.size());
  return 0;
}

int run_gradcheck(const std::string& op, bool full_layer, std::uint64_t seed) {
  std::vector<std::string> names;
  if (full_layer)
    names = {"full_layer"};
  else if (!op.empty())
    names = {op};
  else
    names = ohf::gradcheck_names();

  double worst = 0.0;
  for (const auto& name : names) {
    const double err = ohf::run_gradcheck(name, seed);
    std::printf("%s\t%.3e\n", name.c_str(), err);
    worst = std::max(worst, err);
  }
  std::printf("max_rel_err=%.3e\n", worst);
  return worst < 1e-4 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"OH-Former: high-order transformer for person re-identification"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  int threads = 1;
  if (const char* env = std::getenv("OHF_THREADS")) threads = std::atoi(env);
  app.add_option("--threads", threads,
                 "worker threads for parallel kernels (default $OHF_THREADS, else 1; results are "
                 "identical for any value)");

  auto* synth = app.add_subcommand("synth", "generate a synthetic labeled person dataset");
  std::string synth_out;
  int ids = 0, cams = 0, per_id = 0, height = 60, width = 30;
  double occlude = 0.0;
  std::uint64_t synth_seed = 1;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--ids", ids, "number of identities")->required();
  synth->add_option("--cams", cams, "number of cameras")->required();
  synth->add_option("--per-id", per_id, "images per identity per camera")->required();
  synth->add_option("--height", height, "image height (default 60)");
  synth->add_option("--width", width, "image width (default 30)");
  synth->add_option("--occlude", occlude, "occlusion probability in [0, 1] (default 0)");
  synth->add_option("--seed", synth_seed, "generator seed (default 1)");

  auto* train = app.add_subcommand("train", "run or resume the training loop");
  train->allow_extras();  // --key value pairs override config file entries
  std::string config_path, data_dir = "data", resume, run_dir = "run";
  train->add_option("--config", config_path, "key = value config file")->required();
  train->add_option("--data", data_dir, "training dataset directory (default 'data')");
  train->add_option("--resume", resume, "checkpoint to continue from");
  train->add_option("--run", run_dir, "run directory for config.resolved, log.tsv, checkpoints (default 'run')");
  train->footer("Any config key can be overridden on the command line, e.g. --steps 100 --lr 0.02.");

  auto* eval = app.add_subcommand("eval", "retrieval metrics (mAP, CMC) for a checkpoint");
  std::string eval_ckpt, query_dir, gallery_dir, metrics_out = "metrics.tsv";
  eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--query", query_dir, "query dataset directory")->required();
  eval->add_option("--gallery", gallery_dir, "gallery dataset directory")->required();
  eval->add_option("--out", metrics_out, "metrics TSV path (default metrics.tsv)");

  auto* analyze = app.add_subcommand("analyze", "cross-order attention similarity and score-cost reports");
  std::string analyze_ckpt, analyze_data, direction, analyze_out = ".";
  bool per_head = false;
  analyze->add_option("--ckpt", analyze_ckpt, "checkpoint file")->required();
  analyze->add_option("--data", analyze_data, "dataset directory; the first image drives the forward pass")
      ->required();
  analyze->add_option("--direction", direction, "restrict pooling direction (down|up); default reports both")
      ->check(CLI::IsMember({"down", "up"}));
  analyze->add_flag("--per-head", per_head, "emit per-head rows in addition to head averages");
  analyze->add_option("--out", analyze_out, "output directory for analysis.tsv and flops.tsv (default '.')");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification (64-bit)");
  std::string gc_op;
  bool gc_full_layer = false;
  std::uint64_t gc_seed = 1;
  auto* op_opt = gradcheck->add_option("--op", gc_op, "check one named operation (see error text for the list)");
  gradcheck->add_flag("--full-layer", gc_full_layer, "check a three-order layer with deformable offsets and prior")
      ->excludes(op_opt);
  gradcheck->add_option("--seed", gc_seed, "seed for the random operands (default 1)");
  gradcheck->footer("With no --op/--full-layer, runs the whole suite. Exit 0 iff every error < 1e-4.");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (threads < 1) ohf::fail_config("--threads must be at least 1, got " + std::to_string(threads));
    ohf::set_thread_count(threads);
    if (synth->parsed()) return run_synth(synth_out, ids, cams, per_id, height, width, occlude, synth_seed);
    if (train->parsed()) return run_train(config_path, data_dir, resume, run_dir, train->remaining());
    if (eval->parsed()) return run_eval(eval_ckpt, query_dir, gallery_dir, metrics_out);
    if (analyze->parsed()) return run_analyze(analyze_ckpt, analyze_data, direction, per_head, analyze_out);
    if (gradcheck->parsed()) return run_gradcheck(gc_op, gc_full_layer, gc_seed);
  } catch (const ohf::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
