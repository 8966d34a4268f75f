#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <optional>

#include "efh/model/pipeline.hpp"
#include "efh/training/data.hpp"
#include "efh/training/loss.hpp"

namespace efh::training {

struct TrainConfig {
  double lr = 1e-4;
  std::size_t steps = 1000;
  std::size_t batch = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-4;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.1;
  LossWeights weights;
  DnConfig dn;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Base rate, times 0.1 from 70% of the steps and 0.01 from 90%.
double lr_at(const TrainConfig& cfg, std::size_t step);

/// Decoupled-weight-decay Adam over the trainable entries of a store.
template <typename T>
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 1e-4)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void update(ParamStore<T>& store, const std::map<std::string, Tensor<T>>& grads, double lr);
  std::size_t steps() const { return t_; }

 private:
  struct Moments {
    Tensor<T> m;
    Tensor<T> v;
  };
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

/// A task sample together with its decoded image.
struct TrainExample {
  TensorF image;
  TaskSample sample;
};

/// Builds the full forward pass and loss of one example. Text features
/// come from `cache` when the text encoder is fully frozen and a cache is
/// given, otherwise they are computed in the graph.
template <typename T>
Var<T> example_loss(DiffContext<T>& ctx, const ParamStore<T>& store, const model::ArchConfig& arch,
                    const TrainExample& ex, const LossWeights& w, const DnSample& dn,
                    LossBreakdown* breakdown = nullptr, textenc::LanguageCache<T>* cache = nullptr);

/// Global L2 norm of a gradient map.
template <typename T>
double grad_norm(const std::map<std::string, Tensor<T>>& grads);

/// One optimizer step on `batch`: forward with dn queries, total loss,
/// backward, gradient averaging and clipping, AdamW at lr_at(step).
/// Returns the batch-averaged loss breakdown. Throws NumericError on a
/// non-finite loss.
template <typename T>
LossBreakdown train_step(ParamStore<T>& store, const model::ArchConfig& arch,
                         const std::vector<const TrainExample*>& batch, AdamW<T>& opt,
                         const TrainConfig& cfg, std::size_t step,
                         textenc::LanguageCache<T>* cache = nullptr);

/// Per-step progress handed to a logger.
struct StepLog {
  std::size_t step = 0;
  double lr = 0;
  LossBreakdown loss;
};

/// Runs `cfg.steps` steps, drawing batches from a per-epoch shuffle of
/// `data` seeded by cfg.seed. `log` is called after every step.
template <typename T>
void train(ParamStore<T>& store, const model::ArchConfig& arch, const std::vector<TrainExample>& data,
           const TrainConfig& cfg, const std::function<void(const StepLog&)>& log = {});

// Evaluation -----------------------------------------------------------

struct ApResult {
  std::vector<std::optional<double>> per_label;  // empty when the label has no gt
  double mean = 0;                               // over labels with gt
};

/// Single-threshold AP per label: detections in descending score greedily
/// take the best unmatched gt of their image with IoU >= threshold; the
/// precision envelope is integrated over recall.
ApResult evaluate_ap(const std::vector<std::vector<ela_decoder::Detection>>& detections,
                     const std::vector<GroundTruth>& gts, std::size_t num_labels,
                     double iou_threshold = 0.5);

/// Final-layer detections of every example with score >= threshold.
template <typename T>
std::vector<std::vector<ela_decoder::Detection>> predict(const ParamStore<T>& store,
                                                         const model::ArchConfig& arch,
                                                         const std::vector<TrainExample>& data,
                                                         double threshold = 0.0);

// Checkpoints ----------------------------------------------------------

/// "OTCK" | u32 version = 1 | u32 count | per tensor: u32 name length,
/// name bytes, TNSR record.
template <typename T>
void save_checkpoint(std::ostream& os, const ParamStore<T>& store);
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& store);

/// All entries are loaded as trainable; re-apply freeze flags afterwards.
template <typename T>
ParamStore<T> load_checkpoint(std::istream& is);
template <typename T>
ParamStore<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace efh::training
