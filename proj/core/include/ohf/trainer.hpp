#pragma once

// The training loop: PK batches, augmentation, forward through the model and
// batch-norm-neck heads, the composite loss, SGD with cosine decay, TSV
// logging, and resumable checkpoints. Single logical writer; everything is a
// pure function of (config, dataset, seed), so two runs with the same inputs
// produce bitwise-identical checkpoints.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "ohf/checkpoint.hpp"
#include "ohf/config.hpp"
#include "ohf/data.hpp"
#include "ohf/errors.hpp"
#include "ohf/losses.hpp"
#include "ohf/model.hpp"
#include "ohf/optim.hpp"
#include "ohf/tensor.hpp"

namespace ohf {

struct TrainResult {
  std::uint64_t steps_run = 0;        // completed steps over the run's lifetime
  std::string final_checkpoint;       // path of the last checkpoint written
  std::vector<float> loss_history;    // total loss per step executed in this call
};

namespace detail {

inline void append_text(const std::string& path, const std::string& text) {
  std::FILE* f = std::fopen(path.c_str(), "ab");
  if (!f) fail_io("cannot open '" + path + "' for writing");
  const bool ok = std::fwrite(text.data(), 1, text.size(), f) == text.size() && std::fclose(f) == 0;
  if (!ok) fail_io("failed writing '" + path + "'");
}

inline void write_text(const std::string& path, const std::string& text) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) fail_io("cannot open '" + path + "' for writing");
  const bool ok = std::fwrite(text.data(), 1, text.size(), f) == text.size() && std::fclose(f) == 0;
  if (!ok) fail_io("failed writing '" + path + "'");
}

}  // namespace detail

// Runs (or resumes) training in `run_dir`, writing `config.resolved`,
// `log.tsv`, and `ckpt-{step}.ohf` files. `resume_path` continues from a
// saved checkpoint; `max_steps_this_call` (0 = unlimited) caps how many steps
// this invocation executes before checkpointing and returning, which lets a
// caller interleave training with evaluation without breaking the schedule.
inline TrainResult train_run(const TrainConfig& cfg, const Dataset& ds, const std::string& run_dir,
                             const std::string& resume_path = "", std::int64_t max_steps_this_call = 0) {
  cfg.validate();
  if (ds.height != cfg.input_h || ds.width != cfg.input_w)
    fail_config("dataset images are " + std::to_string(ds.height) + "x" + std::to_string(ds.width) +
                " but the config expects " + std::to_string(cfg.input_h) + "x" + std::to_string(cfg.input_w));
  const ModelConfig mc = cfg.model_config(ds.num_ids());

  std::error_code ec;
  std::filesystem::create_directories(run_dir, ec);
  if (ec) fail_io("cannot create run directory '" + run_dir + "': " + ec.message());

  Rng rng(cfg.seed);
  ModelParams<float> model;
  Sgd<float> opt;
  std::uint64_t step = 0;
  if (resume_path.empty()) {
    model = init_model<float>(mc, rng);
    opt = Sgd<float>(named_params(model), cfg.momentum, cfg.weight_decay);
  } else {
    auto restored = restore_checkpoint(load_checkpoint(resume_path), cfg.momentum, cfg.weight_decay);
    if (restored.config.stack != mc.stack || restored.config.input_h != mc.input_h ||
        restored.config.input_w != mc.input_w || restored.config.num_ids != mc.num_ids)
      fail_config("checkpoint '" + resume_path + "' was trained as '" + model_spec_string(restored.config) +
                  "' which does not match the configured '" + model_spec_string(mc) + "'");
    model = std::move(restored.model);
    opt = std::move(restored.opt);
    step = restored.step;
    rng.set_state(restored.rng_state);
    if (step >= static_cast<std::uint64_t>(cfg.steps))
      fail_config("checkpoint is already at step " + std::to_string(step) + " of " + std::to_string(cfg.steps));
  }

  detail::write_text(run_dir + "/config.resolved", render_train_config(cfg));
  const std::string log_path = run_dir + "/log.tsv";
  if (resume_path.empty() || !std::filesystem::exists(log_path))
    detail::write_text(log_path, "step\tlr\tloss_total\tloss_ce_cls\tloss_tri_cls\tloss_parts\n");

  auto params = named_params(model);
  const int B = cfg.p * cfg.k, d = cfg.width;
  const AugmentConfig aug{cfg.flip, cfg.erase};

  TrainResult result;
  result.steps_run = step;
  std::uint64_t last_saved = ~std::uint64_t{0};
  auto save = [&](std::uint64_t at) {
    const std::string path = run_dir + "/ckpt-" + std::to_string(at) + ".ohf";
    save_checkpoint(path, make_checkpoint(mc, model, opt, at, rng.state()));
    result.final_checkpoint = path;
    last_saved = at;
  };

  std::int64_t executed = 0;
  while (step < static_cast<std::uint64_t>(cfg.steps)) {
    if (max_steps_this_call > 0 && executed == max_steps_this_call) break;
    const double lr = cosine_lr(static_cast<std::int64_t>(step), cfg.steps, cfg.lr);

    auto batch = pk_sample(ds, cfg.p, cfg.k, rng);
    auto images = make_batch(ds, batch.item_indices, rng, &aug);

    auto fr = forward(images, model, mc);
    auto cls = bnneck(fr.z_cls, model.cls_head, /*training=*/true);
    std::vector<HeadOutput<float>> parts;
    parts.reserve(static_cast<std::size_t>(cfg.parts));
    for (int kpart = 0; kpart < cfg.parts; ++kpart) {
      auto f = reshape(slice_tokens(fr.parts, kpart, kpart + 1), {B, d});
      parts.push_back(bnneck(f, model.part_heads[static_cast<std::size_t>(kpart)], /*training=*/true));
    }
    auto loss = total_loss(cls, parts, batch.labels, static_cast<float>(cfg.margin));
    const float total = loss.total.item();
    const float part_term = loss.parts;
    if (!std::isfinite(total))
      fail_numeric("loss is not finite at step " + std::to_string(step + 1));

    opt.zero_grad(params);
    loss.total.backward();
    opt.step(params, lr);

    ++step;
    ++executed;
    result.steps_run = step;
    result.loss_history.push_back(total);

    char line[192];
    std::snprintf(line, sizeof line, "%llu\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\n",
                  static_cast<unsigned long long>(step), lr, static_cast<double>(total),
                  static_cast<double>(loss.ce_cls), static_cast<double>(loss.tri_cls),
                  static_cast<double>(part_term));
    detail::append_text(log_path, line);

    if (cfg.checkpoint_every > 0 && step % static_cast<std::uint64_t>(cfg.checkpoint_every) == 0) save(step);
  }
  if (last_saved != step) save(step);
  return result;
}

}  // namespace ohf
