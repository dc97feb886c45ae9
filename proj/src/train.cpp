#include "vik/train.hpp"

#include "vik/loss.hpp"
#include "vik/optim.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <thread>

namespace vik {
namespace {

using NamedF = std::vector<std::pair<std::string, Param<float>*>>;

NamedF collect_params(Backbone<float>& net) {
  NamedF out;
  visit_params(net, [&](const std::string& name, Param<float>& p) { out.emplace_back(name, &p); });
  return out;
}

TensorF gather_batch(const Dataset& ds, const std::vector<int>& order, int from, int count,
                     std::vector<int>& labels) {
  const int C = ds.images.dim(1), H = ds.images.dim(2), W = ds.images.dim(3);
  const std::int64_t plane = static_cast<std::int64_t>(C) * H * W;
  TensorF batch({count, C, H, W});
  labels.resize(count);
  for (int i = 0; i < count; ++i) {
    const int src = order[from + i];
    std::copy(ds.images.data() + src * plane, ds.images.data() + (src + 1) * plane,
              batch.data() + i * plane);
    labels[i] = ds.labels[src];
  }
  return batch;
}

struct ChunkOut {
  double loss_sum = 0;  // sum over images of per-image loss
  int correct = 0;
};

ChunkOut forward_chunk(const Backbone<float>& net, const TensorF& images,
                       const std::vector<int>& labels, int from, int count) {
  const std::int64_t plane =
      static_cast<std::int64_t>(images.dim(1)) * images.dim(2) * images.dim(3);
  TensorF part({count, images.dim(1), images.dim(2), images.dim(3)},
               std::vector<float>(images.data() + from * plane,
                                  images.data() + (from + count) * plane));
  std::vector<int> lab(labels.begin() + from, labels.begin() + from + count);
  TensorF logits = backbone_forward(part, net);
  auto ce = cross_entropy(logits, lab);
  ChunkOut out;
  out.loss_sum = static_cast<double>(ce.loss) * count;
  for (int b = 0; b < count; ++b)
    if (argmax_row(&logits(b, 0), logits.dim(1)) == lab[b]) ++out.correct;
  return out;
}

std::vector<std::pair<int, int>> chunk_ranges(int n, int parts) {
  std::vector<std::pair<int, int>> out;
  const int per = (n + parts - 1) / parts;
  for (int from = 0; from < n; from += per) out.emplace_back(from, std::min(per, n - from));
  return out;
}

// One optimizer step over a batch. With T > 1, workers run forward/backward
// on private model copies and gradients are reduced in chunk order, so the
// result is deterministic for a fixed thread count.
double train_step(Backbone<float>& net, const NamedF& params, AdamW<float>& opt,
                  const TensorF& images, const std::vector<int>& labels, double lr,
                  double clip_norm, int threads) {
  const int B = images.dim(0);
  zero_grads(net);
  double loss = 0;

  const auto ranges = chunk_ranges(B, std::min(threads, B));
  if (ranges.size() == 1) {
    BackboneTape<float> tape;
    TensorF logits = backbone_forward(images, net, &tape);
    auto ce = cross_entropy(logits, labels);
    backbone_backward(net, tape, ce.dlogits);
    loss = ce.loss;
  } else {
    std::vector<Backbone<float>> copies(ranges.size(), net);
    std::vector<double> losses(ranges.size(), 0);
    std::vector<std::thread> pool;
    for (size_t t = 0; t < ranges.size(); ++t)
      pool.emplace_back([&, t]() {
        auto [from, count] = ranges[t];
        const std::int64_t plane =
            static_cast<std::int64_t>(images.dim(1)) * images.dim(2) * images.dim(3);
        TensorF part({count, images.dim(1), images.dim(2), images.dim(3)},
                     std::vector<float>(images.data() + from * plane,
                                        images.data() + (from + count) * plane));
        std::vector<int> lab(labels.begin() + from, labels.begin() + from + count);
        zero_grads(copies[t]);
        BackboneTape<float> tape;
        TensorF logits = backbone_forward(part, copies[t], &tape);
        auto ce = cross_entropy(logits, lab);
        backbone_backward(copies[t], tape, ce.dlogits);
        losses[t] = ce.loss;
      });
    for (auto& th : pool) th.join();
    for (size_t t = 0; t < ranges.size(); ++t) {
      const float scale = static_cast<float>(ranges[t].second) / static_cast<float>(B);
      loss += losses[t] * ranges[t].second / B;
      NamedF chunk_params = collect_params(copies[t]);
      for (size_t i = 0; i < params.size(); ++i) {
        float* dst = params[i].second->grad.data();
        const float* src = chunk_params[i].second->grad.data();
        for (std::int64_t j = 0; j < params[i].second->size(); ++j) dst[j] += scale * src[j];
      }
    }
  }

  clip_grad_norm(params, clip_norm);
  opt.step(params, static_cast<float>(lr));
  return loss;
}

}  // namespace

int thread_count() {
  if (const char* env = std::getenv("VIK_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1)
      throw ConfigError("VIK_THREADS must be a positive integer, got '" + std::string(env) + "'");
    return static_cast<int>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

std::pair<Dataset, Dataset> make_synth_splits(const TrainSetup& setup) {
  if (setup.model.in_h != setup.model.in_w)
    throw ConfigError("synth: square input required, got " + std::to_string(setup.model.in_h) +
                      "x" + std::to_string(setup.model.in_w));
  const auto& tp = setup.train;
  Dataset train = synth_dataset(setup.model.seed, tp.synth_per_class, tp.synth_classes,
                                setup.model.in_h, tp.synth_sigma);
  train.split = "train";
  Dataset val = synth_dataset(setup.model.seed + 1, tp.synth_val_per_class, tp.synth_classes,
                              setup.model.in_h, tp.synth_sigma);
  val.split = "val";
  return {std::move(train), std::move(val)};
}

EvalResult evaluate(Backbone<float>& net, const Dataset& ds, int batch) {
  EvalResult res;
  res.n = ds.n();
  if (res.n == 0) return res;
  const int threads = thread_count();
  std::vector<int> order(ds.n());
  for (int i = 0; i < ds.n(); ++i) order[i] = i;
  double loss_sum = 0;
  int correct = 0;
  for (int from = 0; from < ds.n(); from += batch) {
    const int count = std::min(batch, ds.n() - from);
    std::vector<int> labels;
    TensorF images = gather_batch(ds, order, from, count, labels);
    const auto ranges = chunk_ranges(count, std::min(threads, count));
    if (ranges.size() == 1) {
      ChunkOut out = forward_chunk(net, images, labels, 0, count);
      loss_sum += out.loss_sum;
      correct += out.correct;
    } else {
      std::vector<ChunkOut> outs(ranges.size());
      std::vector<std::thread> pool;
      for (size_t t = 0; t < ranges.size(); ++t)
        pool.emplace_back([&, t]() {
          outs[t] = forward_chunk(net, images, labels, ranges[t].first, ranges[t].second);
        });
      for (auto& th : pool) th.join();
      for (const auto& out : outs) {
        loss_sum += out.loss_sum;
        correct += out.correct;
      }
    }
  }
  res.loss = loss_sum / res.n;
  res.acc = static_cast<double>(correct) / res.n;
  return res;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "epoch,step,train_loss,train_acc,val_acc,lr\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%lld,%.6f,%.6f,", r.epoch,
                  static_cast<long long>(r.step), r.train_loss, r.train_acc);
    out += buf;
    if (std::isfinite(r.val_acc)) {
      std::snprintf(buf, sizeof(buf), "%.6f", r.val_acc);
      out += buf;
    }
    std::snprintf(buf, sizeof(buf), ",%.8g\n", r.lr);
    out += buf;
  }
  return out;
}

TrainResult train_loop(const TrainSetup& setup, const Dataset& train_ds, const Dataset& val_ds,
                       const std::string& out_dir, bool verbose) {
  namespace fs = std::filesystem;
  const auto& tp = setup.train;
  if (train_ds.n() == 0) throw DataError("train: empty training set");
  if (train_ds.images.dim(2) != setup.model.in_h || train_ds.images.dim(3) != setup.model.in_w)
    throw ConfigError("train: dataset resolution " + std::to_string(train_ds.images.dim(2)) +
                      "x" + std::to_string(train_ds.images.dim(3)) +
                      " does not match configured " + std::to_string(setup.model.in_h));
  for (size_t i = 0; i < train_ds.labels.size(); ++i)
    if (train_ds.labels[i] < 0 || train_ds.labels[i] >= setup.model.num_classes)
      throw DataError("train: label " + std::to_string(train_ds.labels[i]) + " at index " +
                      std::to_string(i) + " outside configured classes");
  fs::create_directories(out_dir);

  Rng rng(setup.model.seed);
  auto net = build_backbone<float>(setup.model, rng);
  NamedF params = collect_params(net);
  AdamW<float> opt;
  opt.weight_decay = static_cast<float>(tp.weight_decay);
  opt.init(params);

  const int threads = thread_count();
  const std::string cfg_text = canonical_text(setup);
  const std::int64_t steps_per_epoch = (train_ds.n() + tp.batch - 1) / tp.batch;
  const std::int64_t total_steps = steps_per_epoch * tp.epochs;

  TrainResult result;
  result.metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  result.last_ckpt_path = (fs::path(out_dir) / "last.ckpt").string();
  result.best_ckpt_path = (fs::path(out_dir) / "best.ckpt").string();
  double best = -1;
  std::int64_t step = 0;

  auto flush_metrics = [&]() {
    std::ofstream out(result.metrics_path, std::ios::binary | std::ios::trunc);
    out << metrics_csv(result.history);
  };

  std::vector<int> order(train_ds.n());
  for (int i = 0; i < train_ds.n(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= tp.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0;
    double lr = 0;
    for (int from = 0; from < train_ds.n(); from += tp.batch) {
      const int count = std::min(tp.batch, train_ds.n() - from);
      std::vector<int> labels;
      TensorF images = gather_batch(train_ds, order, from, count, labels);
      if (tp.augment_flip)
        for (int b = 0; b < count; ++b)
          if (rng.uniform01() < 0.5) flip_horizontal(images, b);
      ++step;
      lr = lr_schedule(step, total_steps, tp.lr_peak, tp.lr_floor, tp.warmup_frac);
      double loss;
      try {
        loss = train_step(net, params, opt, images, labels, lr, tp.clip_norm, threads);
      } catch (const NumericalError& e) {
        flush_metrics();
        throw NumericalError("train: aborted at step " + std::to_string(step) + ": " + e.what());
      }
      if (!std::isfinite(loss)) {
        flush_metrics();
        throw NumericalError("train: non-finite loss at step " + std::to_string(step) +
                             "; last checkpoint kept at " + result.last_ckpt_path);
      }
      epoch_loss += loss * count;
    }

    const EvalResult train_eval = evaluate(net, train_ds, tp.batch);
    const EvalResult val_eval =
        val_ds.n() ? evaluate(net, val_ds, tp.batch)
                   : EvalResult{std::numeric_limits<double>::quiet_NaN(), 0, 0};
    MetricsRow row{epoch, step, epoch_loss / train_ds.n(), train_eval.acc, val_eval.acc, lr};
    result.history.push_back(row);
    if (verbose)
      std::printf("epoch %3d  step %6lld  loss %.4f  train_acc %.4f  val_acc %.4f  lr %.2e\n",
                  epoch, static_cast<long long>(step), row.train_loss, row.train_acc,
                  std::isfinite(row.val_acc) ? row.val_acc : 0.0, lr);

    CheckpointData ckpt = snapshot(net, cfg_text, &opt, rng.state());
    save_checkpoint(result.last_ckpt_path, ckpt);
    if (val_ds.n() && val_eval.acc > best) {
      best = val_eval.acc;
      save_checkpoint(result.best_ckpt_path, ckpt);
    }
    result.final_train_acc = train_eval.acc;
    result.final_val_acc = val_eval.acc;
  }
  result.best_val_acc = best < 0 ? result.final_val_acc : best;
  flush_metrics();
  return result;
}

}  // namespace vik
