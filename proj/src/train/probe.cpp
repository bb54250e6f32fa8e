#include "bicap/probe.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "bicap/errors.hpp"
#include "bicap/image.hpp"

namespace bicap {

namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

Matrix as_matrix(const FeatureSet& f) {
  return Eigen::Map<const Matrix>(f.x.data(), static_cast<Eigen::Index>(f.rows), static_cast<Eigen::Index>(f.dim));
}

struct Standardizer {
  Vector mean, scale;

  Standardizer(const FeatureSet& train, std::size_t dim, bool enabled) : mean(Vector::Zero(dim)), scale(Vector::Ones(dim)) {
    if (!enabled || train.rows == 0) return;
    const Matrix x = as_matrix(train);
    mean = x.colwise().mean().transpose();
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double var = (x.col(j).array() - mean(j)).square().mean();
      scale(j) = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
    }
  }

  Matrix apply(const FeatureSet& f) const {
    Matrix x = as_matrix(f);
    x.rowwise() -= mean.transpose();
    x = x * scale.asDiagonal();
    return x;
  }
};

FeatureSet subset(const FeatureSet& f, const std::vector<std::size_t>& rows) {
  FeatureSet out;
  out.rows = rows.size();
  out.dim = f.dim;
  for (auto r : rows) {
    const auto src = f.row(r);
    out.x.insert(out.x.end(), src.begin(), src.end());
    out.labels.push_back(f.labels[r]);
  }
  return out;
}

bool has_label(const std::vector<int>& labels, std::size_t c) {
  return std::find(labels.begin(), labels.end(), static_cast<int>(c)) != labels.end();
}

// Squared-hinge SVM on an already transformed design matrix.
SvmModel fit_svm(const Matrix& x, const Vector& y, double cost) {
  if (!(cost > 0)) throw ParameterError("svm: cost must be positive");
  const Eigen::Index n = x.rows(), d = x.cols();
  const double lambda = 1.0 / (2.0 * cost * static_cast<double>(n));
  Matrix xt(n, d + 1);
  xt.leftCols(d) = x;
  xt.col(d).setOnes();
  Vector theta = Vector::Zero(d + 1);
  Vector reg = Vector::Constant(d + 1, 2.0 * lambda);
  reg(d) = 1e-10;  // bias is (almost) unregularized

  auto objective = [&](const Vector& th) {
    const Vector r = (Vector::Ones(n) - y.cwiseProduct(xt * th)).cwiseMax(0.0);
    return lambda * th.head(d).squaredNorm() + r.squaredNorm() / static_cast<double>(n);
  };
  double f = objective(theta);
  for (int it = 0; it < 100; ++it) {
    const Vector margin = y.cwiseProduct(xt * theta);
    Vector grad = 2.0 * lambda * theta;
    grad(d) = 0.0;
    Matrix hess = Matrix::Zero(d + 1, d + 1);
    hess.diagonal() = reg;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (margin(i) >= 1.0) continue;
      const double r = 1.0 - margin(i);
      grad -= (2.0 / static_cast<double>(n)) * y(i) * r * xt.row(i).transpose();
      hess.noalias() += (2.0 / static_cast<double>(n)) * xt.row(i).transpose() * xt.row(i);
    }
    if (grad.norm() < 1e-12) break;
    const Vector step = -hess.ldlt().solve(grad);
    const double slope = grad.dot(step);
    if (!(slope < 0)) break;
    double t = 1.0;
    double next = objective(theta + step);
    while (next > f + 1e-4 * t * slope && t > 1e-12) {
      t *= 0.5;
      next = objective(theta + t * step);
    }
    if (t <= 1e-12) break;
    theta += t * step;
    const double drop = f - next;
    f = next;
    if (drop <= 1e-16 * std::max(1.0, std::abs(f))) break;
  }
  SvmModel m;
  m.w.assign(theta.data(), theta.data() + d);
  m.b = theta(d);
  return m;
}

Vector decision(const Matrix& x, const SvmModel& m) {
  const Vector w = Eigen::Map<const Vector>(m.w.data(), static_cast<Eigen::Index>(m.w.size()));
  return (x * w).array() + m.b;
}

Vector class_targets(const FeatureSet& f, std::size_t c) {
  Vector y(static_cast<Eigen::Index>(f.rows));
  for (std::size_t i = 0; i < f.rows; ++i) y(static_cast<Eigen::Index>(i)) = has_label(f.labels[i], c) ? 1.0 : -1.0;
  return y;
}

double mean_ignoring_nan(const std::vector<double>& v) {
  double s = 0;
  std::size_t k = 0;
  for (double x : v)
    if (!std::isnan(x)) s += x, ++k;
  return k ? s / static_cast<double>(k) : 0.0;
}

struct SvmEval {
  double map = 0;
  double accuracy = 0;
  std::vector<double> ap;
};

SvmEval svm_fit_eval(const FeatureSet& train, const FeatureSet& test, std::size_t classes, double cost,
                     bool standardize) {
  const Standardizer st(train, train.dim, standardize);
  const Matrix xtr = st.apply(train), xte = st.apply(test);
  Matrix scores(static_cast<Eigen::Index>(test.rows), static_cast<Eigen::Index>(classes));
  SvmEval out;
  for (std::size_t c = 0; c < classes; ++c) {
    const SvmModel m = fit_svm(xtr, class_targets(train, c), cost);
    const Vector s = decision(xte, m);
    scores.col(static_cast<Eigen::Index>(c)) = s;
    std::vector<bool> pos(test.rows);
    for (std::size_t i = 0; i < test.rows; ++i) pos[i] = has_label(test.labels[i], c);
    out.ap.push_back(average_precision(std::vector<double>(s.data(), s.data() + s.size()), pos));
  }
  out.map = mean_ignoring_nan(out.ap);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.rows; ++i) {
    Eigen::Index best = 0;
    scores.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
    if (has_label(test.labels[i], static_cast<std::size_t>(best))) ++correct;
  }
  out.accuracy = test.rows ? static_cast<double>(correct) / static_cast<double>(test.rows) : 0.0;
  return out;
}

ProbeReport run_svm(const FeatureSet& train, const FeatureSet& test, std::size_t classes, const ProbeOptions& opt) {
  std::set<int> distinct;
  for (const auto& l : train.labels) distinct.insert(l.begin(), l.end());
  if (distinct.size() < 2) throw ProtocolError("svm probe needs at least two classes in the training split");
  if (opt.costs.empty()) throw ParameterError("svm probe: empty cost sweep");
  if (opt.folds < 2 || train.rows < opt.folds) throw ProtocolError("svm probe: too few rows for cross-validation");

  ProbeReport report;
  report.protocol = ProbeProtocol::svm;
  report.classes = classes;
  double best = -1;
  for (double cost : opt.costs) {
    std::vector<double> folds;
    for (std::size_t k = 0; k < opt.folds; ++k) {
      std::vector<std::size_t> fit, held;
      for (std::size_t i = 0; i < train.rows; ++i) (i % opt.folds == k ? held : fit).push_back(i);
      folds.push_back(svm_fit_eval(subset(train, fit), subset(train, held), classes, cost, opt.standardize).map);
    }
    const double score = std::accumulate(folds.begin(), folds.end(), 0.0) / static_cast<double>(folds.size());
    report.costs.push_back(cost);
    report.fold_scores.push_back(folds);
    report.cost_scores.push_back(score);
    if (score > best) best = score, report.chosen_cost = cost;
  }
  const SvmEval final_eval = svm_fit_eval(train, test, classes, report.chosen_cost, opt.standardize);
  report.metric = final_eval.map;
  report.accuracy = final_eval.accuracy;
  report.per_class = final_eval.ap;
  for (auto& ap : report.per_class)
    if (std::isnan(ap)) ap = -1;
  return report;
}

ProbeReport run_softmax(const FeatureSet& train, const FeatureSet& test, std::size_t classes, const ProbeOptions& opt) {
  for (const auto* f : {&train, &test})
    for (const auto& l : f->labels)
      if (l.size() != 1) throw ProtocolError("softmax probe needs exactly one label per image");
  if (classes == 0 || train.rows == 0) throw ProtocolError("softmax probe: empty training split");
  const Standardizer st(train, train.dim, opt.standardize);
  const Matrix x = st.apply(train), xte = st.apply(test);
  const Eigen::Index n = x.rows(), d = x.cols(), K = static_cast<Eigen::Index>(classes);
  Matrix y = Matrix::Zero(n, K);
  for (Eigen::Index i = 0; i < n; ++i) y(i, train.labels[static_cast<std::size_t>(i)][0]) = 1.0;
  Matrix w = Matrix::Zero(d, K);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(K);
  for (std::size_t t = 0; t < opt.softmax_steps; ++t) {
    const double lr = opt.softmax_lr * 0.5 *
                      (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(opt.softmax_steps)));
    Matrix z = (x * w).rowwise() + b;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double m = z.row(i).maxCoeff();
      z.row(i) = (z.row(i).array() - m).exp();
      z.row(i) /= z.row(i).sum();
    }
    const Matrix err = (z - y) / static_cast<double>(n);
    w -= lr * (x.transpose() * err);
    b -= lr * err.colwise().sum();
  }
  const Matrix scores = (xte * w).rowwise() + b;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    scores.row(i).maxCoeff(&best);
    if (best == test.labels[static_cast<std::size_t>(i)][0]) ++correct;
  }
  ProbeReport report;
  report.protocol = ProbeProtocol::softmax;
  report.classes = classes;
  report.chosen_cost = 0;
  report.accuracy = test.rows ? static_cast<double>(correct) / static_cast<double>(test.rows) : 0.0;
  report.metric = report.accuracy;
  return report;
}

}  // namespace

FeatureSet extract_features(const Backbone& backbone, const std::vector<CaptionRecord>& records,
                            std::size_t image_size, std::size_t batch_size) {
  if (batch_size == 0) throw ParameterError("extract_features: batch size must be positive");
  nn::ParamList params;
  backbone.collect("backbone", params);
  const DType dtype = params.empty() ? DType::f32 : params.front().tensor.dtype();
  FeatureSet out;
  NoGradGuard guard;
  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    std::vector<Tensor> images;
    const std::size_t end = std::min(records.size(), start + batch_size);
    for (std::size_t i = start; i < end; ++i) {
      Tensor img = records[i].image;
      if (img.dim(1) != image_size || img.dim(2) != image_size) img = image::resize_bilinear(img, image_size, image_size);
      images.push_back(normalize_image(img, kImageNetMean, kImageNetStd));
      out.labels.push_back(records[i].labels);
    }
    const Tensor pooled = backbone.pooled_features(stack_images(images).to(dtype), false);
    out.dim = pooled.dim(1);
    const auto v = pooled.to_vector();
    out.x.insert(out.x.end(), v.begin(), v.end());
  }
  out.rows = records.size();
  return out;
}

std::pair<FeatureSet, FeatureSet> split_by_parity(const FeatureSet& all) {
  std::vector<std::size_t> even, odd;
  for (std::size_t i = 0; i < all.rows; ++i) (i % 2 == 0 ? even : odd).push_back(i);
  return {subset(all, even), subset(all, odd)};
}

std::size_t count_classes(const FeatureSet& a, const FeatureSet& b) {
  int top = -1;
  for (const auto* f : {&a, &b})
    for (const auto& l : f->labels)
      for (int c : l) {
        if (c < 0) throw ProtocolError("probe: negative class label");
        top = std::max(top, c);
      }
  return static_cast<std::size_t>(top + 1);
}

double average_precision(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw DimensionError("average_precision: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  double hits = 0, sum = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (!positive[order[k]]) continue;
    hits += 1;
    sum += hits / static_cast<double>(k + 1);
  }
  return hits > 0 ? sum / hits : std::numeric_limits<double>::quiet_NaN();
}

SvmModel train_squared_hinge(const FeatureSet& data, const std::vector<double>& y, double cost) {
  if (y.size() != data.rows) throw DimensionError("train_squared_hinge: one label per row required");
  return fit_svm(as_matrix(data), Eigen::Map<const Vector>(y.data(), static_cast<Eigen::Index>(y.size())), cost);
}

ProbeReport linear_probe(const FeatureSet& train, const FeatureSet& test, ProbeProtocol protocol,
                         const ProbeOptions& options) {
  if (train.dim != test.dim && test.rows > 0) throw DimensionError("linear_probe: train and test feature widths differ");
  if (train.labels.size() != train.rows || test.labels.size() != test.rows)
    throw DimensionError("linear_probe: one label set per row required");
  const std::size_t classes = count_classes(train, test);
  return protocol == ProbeProtocol::svm ? run_svm(train, test, classes, options)
                                        : run_softmax(train, test, classes, options);
}

std::string ProbeReport::to_text() const {
  std::ostringstream os;
  os << std::setprecision(6);
  os << "protocol " << probe_protocol_name(protocol) << "\n";
  os << "metric " << (protocol == ProbeProtocol::svm ? "mAP " : "top1 ") << metric << "\n";
  os << "accuracy " << accuracy << "\n";
  os << "classes " << classes << "\n";
  if (protocol == ProbeProtocol::svm) {
    os << "chosen_cost " << chosen_cost << "\n";
    for (std::size_t i = 0; i < cost_scores.size(); ++i) {
      os << "cv C=" << costs[i] << " mAP " << cost_scores[i] << " folds";
      for (double f : fold_scores[i]) os << " " << f;
      os << "\n";
    }
    for (std::size_t c = 0; c < per_class.size(); ++c) os << "ap_" << c << " " << per_class[c] << "\n";
  }
  return os.str();
}

}  // namespace bicap
