#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bicap/backbone.hpp"
#include "bicap/config.hpp"
#include "bicap/data.hpp"

namespace bicap {

// Row-major features with one label set per row.
struct FeatureSet {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<double> x;
  std::vector<std::vector<int>> labels;

  std::span<const double> row(std::size_t i) const { return {x.data() + i * dim, dim}; }
};

// Pooled backbone features of every record in eval mode, without gradients.
// Images are resized to `image_size` and normalized with ImageNet statistics.
FeatureSet extract_features(const Backbone& backbone, const std::vector<CaptionRecord>& records,
                            std::size_t image_size, std::size_t batch_size = 32);

// Even rows train, odd rows test.
std::pair<FeatureSet, FeatureSet> split_by_parity(const FeatureSet& all);

struct ProbeOptions {
  std::vector<double> costs{0.01, 0.1, 1.0, 10.0};
  std::size_t folds = 3;
  double softmax_lr = 0.3;
  std::size_t softmax_steps = 300;
  // Per-dimension standardization with training statistics.
  bool standardize = true;
};

struct ProbeReport {
  ProbeProtocol protocol = ProbeProtocol::svm;
  double metric = 0;    // svm: test mAP; softmax: test top-1 accuracy
  double accuracy = 0;  // test top-1 accuracy (argmax over class scores)
  std::vector<double> per_class;  // svm: AP per class (-1 when no test positive)
  double chosen_cost = 0;
  std::vector<double> costs;
  std::vector<double> cost_scores;                // mean CV mAP per cost
  std::vector<std::vector<double>> fold_scores;   // [cost][fold]
  std::size_t classes = 0;

  std::string to_text() const;
};

// Number of classes implied by the labels (max label + 1).
std::size_t count_classes(const FeatureSet& a, const FeatureSet& b);

/// Linear probe on frozen features.
///
/// svm: one squared-hinge classifier per class, minimizing
/// lambda*|w|^2 + mean((1 - y*(w.x + b))_+^2) with lambda = 1/(2*C*n),
/// solved by Newton iterations; C is chosen by k-fold cross-validated mAP.
/// softmax: one linear layer trained by full-batch gradient descent with a
/// cosine-decayed rate.
/// Throws ProtocolError for svm with fewer than two classes and for softmax
/// on multi-label rows.
ProbeReport linear_probe(const FeatureSet& train, const FeatureSet& test, ProbeProtocol protocol,
                         const ProbeOptions& options = {});

// Non-interpolated average precision; NaN when there is no positive.
double average_precision(const std::vector<double>& scores, const std::vector<bool>& positive);

struct SvmModel {
  std::vector<double> w;
  double b = 0;
};
// Binary squared-hinge SVM, labels +1/-1.
SvmModel train_squared_hinge(const FeatureSet& data, const std::vector<double>& y, double cost);

}  // namespace bicap
