#pragma once

#include "vik/checkpoint.hpp"
#include "vik/config.hpp"
#include "vik/data.hpp"

#include <string>
#include <vector>

namespace vik {

struct MetricsRow {
  int epoch = 0;
  std::int64_t step = 0;
  double train_loss = 0;
  double train_acc = 0;  // frozen end-of-epoch evaluation over the train split
  double val_acc = 0;
  double lr = 0;
};

struct TrainResult {
  std::vector<MetricsRow> history;
  double final_train_acc = 0;
  double final_val_acc = 0;
  double best_val_acc = 0;
  std::string metrics_path, last_ckpt_path, best_ckpt_path;
};

struct EvalResult {
  double acc = 0;
  double loss = 0;
  int n = 0;
};

// VIK_THREADS if set, else hardware concurrency; always >= 1
int thread_count();

// train split uses model.seed, val split model.seed + 1; square input required
std::pair<Dataset, Dataset> make_synth_splits(const TrainSetup& setup);

EvalResult evaluate(Backbone<float>& net, const Dataset& ds, int batch);

std::string metrics_csv(const std::vector<MetricsRow>& rows);

// Deterministic given (setup, datasets): writes metrics.csv, last.ckpt and
// best.ckpt under out_dir. A non-finite loss aborts with the previous epoch's
// checkpoint left in place.
TrainResult train_loop(const TrainSetup& setup, const Dataset& train_ds, const Dataset& val_ds,
                       const std::string& out_dir, bool verbose = true);

}  // namespace vik
