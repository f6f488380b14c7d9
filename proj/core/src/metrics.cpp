#include "kplift/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <stdexcept>

namespace kplift {

namespace {

Structure3D centered(const Structure3D& x) { return x.colwise() - x.rowwise().mean(); }

double mean_distance(const Structure3D& a, const Structure3D& b) {
  return (a - b).colwise().norm().sum() / static_cast<double>(a.cols());
}

void check_pair(const Structure3D& predicted, const Structure3D& truth, const char* what) {
  if (predicted.cols() != truth.cols()) {
    throw std::invalid_argument(std::string(what) + ": point counts differ (" + std::to_string(predicted.cols()) +
                                " vs " + std::to_string(truth.cols()) + ")");
  }
}

}  // namespace

MpjpeResult mpjpe_detail(const Structure3D& predicted, const Structure3D& truth) {
  check_pair(predicted, truth, "mpjpe");
  if (truth.cols() < 1) throw std::invalid_argument("mpjpe: no points");
  const Structure3D y = centered(truth);
  const Structure3D x = centered(predicted);
  // Flipping commutes with centering, so both branches see the same points
  // up to the sign of the depth row.
  Structure3D xf = x;
  xf.row(2) = -x.row(2);
  const double direct = mean_distance(x, y);
  const double flipped = mean_distance(xf, y);
  if (flipped < direct) return {flipped, true};
  return {direct, false};
}

double mpjpe(const Structure3D& predicted, const Structure3D& truth) {
  const MpjpeResult r = mpjpe_detail(predicted, truth);
  return r.value;
}

double stress(const Structure3D& predicted, const Structure3D& truth) {
  check_pair(predicted, truth, "stress");
  const Eigen::Index k = truth.cols();
  if (k < 2) throw std::invalid_argument("stress: needs at least 2 points");
  double total = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = i + 1; j < k; ++j) {
      total += std::fabs((predicted.col(i) - predicted.col(j)).norm() - (truth.col(i) - truth.col(j)).norm());
    }
  }
  return total / static_cast<double>(k * (k - 1));
}

double mutual_coherence(const Eigen::MatrixXd& w) {
  if (w.cols() < 2) throw std::invalid_argument("mutual_coherence: needs at least 2 columns");
  Eigen::MatrixXd unit = w;
  for (Eigen::Index c = 0; c < w.cols(); ++c) {
    const double n = w.col(c).norm();
    if (n == 0.0) throw std::invalid_argument("mutual_coherence: column " + std::to_string(c) + " is zero");
    unit.col(c) /= n;
  }
  double best = 0.0;
  for (Eigen::Index i = 0; i < w.cols(); ++i) {
    for (Eigen::Index j = i + 1; j < w.cols(); ++j) {
      best = std::max(best, std::fabs(unit.col(i).dot(unit.col(j))));
    }
  }
  return std::min(best, 1.0);
}

EvalAccumulator::EvalAccumulator(std::vector<std::string> category_names)
    : names_(std::move(category_names)),
      mpjpe_sum_(names_.size(), 0.0),
      stress_sum_(names_.size(), 0.0),
      count_(names_.size(), 0) {}

void EvalAccumulator::add(int category, const Structure3D& predicted, const Structure3D& truth,
                          bool category_correct) {
  if (category < 0 || static_cast<std::size_t>(category) >= names_.size()) {
    throw std::out_of_range("EvalAccumulator: unknown category " + std::to_string(category));
  }
  const auto c = static_cast<std::size_t>(category);
  const MpjpeResult m = mpjpe_detail(predicted, truth);
  mpjpe_sum_[c] += m.value;
  stress_sum_[c] += stress(predicted, truth);
  ++count_[c];
  if (m.flipped) ++flips_;
  if (category_correct) ++correct_;
}

EvalReport EvalAccumulator::report() const {
  EvalReport r;
  double m = 0.0;
  double s = 0.0;
  for (std::size_t c = 0; c < names_.size(); ++c) {
    CategoryMetrics cm;
    cm.name = names_[c];
    cm.samples = count_[c];
    if (count_[c] > 0) {
      cm.mpjpe = mpjpe_sum_[c] / static_cast<double>(count_[c]);
      cm.stress = stress_sum_[c] / static_cast<double>(count_[c]);
    }
    r.per_category.push_back(cm);
    m += mpjpe_sum_[c];
    s += stress_sum_[c];
    r.samples += count_[c];
  }
  if (r.samples > 0) {
    const auto n = static_cast<double>(r.samples);
    r.mpjpe = m / n;
    r.stress = s / n;
    r.flip_fraction = static_cast<double>(flips_) / n;
    r.category_accuracy = static_cast<double>(correct_) / n;
  }
  return r;
}

void EvalReport::write_table(std::ostream& out) const {
  const auto flags = out.flags();
  out << std::left << std::setw(16) << "category" << std::right << std::setw(9) << "samples" << std::setw(12)
      << "mpjpe" << std::setw(12) << "stress" << '\n';
  out << std::fixed << std::setprecision(5);
  for (const auto& c : per_category) {
    out << std::left << std::setw(16) << c.name << std::right << std::setw(9) << c.samples << std::setw(12) << c.mpjpe
        << std::setw(12) << c.stress << '\n';
  }
  out << std::left << std::setw(16) << "all" << std::right << std::setw(9) << samples << std::setw(12) << mpjpe
      << std::setw(12) << stress << '\n';
  out << "flip fraction " << flip_fraction << ", category accuracy " << category_accuracy << '\n';
  out.flags(flags);
}

void EvalReport::write_key_values(std::ostream& out) const {
  const auto flags = out.flags();
  const auto precision = out.precision();
  out << std::setprecision(17);
  out << "samples " << samples << '\n';
  out << "mpjpe " << mpjpe << '\n';
  out << "stress " << stress << '\n';
  out << "flip_fraction " << flip_fraction << '\n';
  out << "category_accuracy " << category_accuracy << '\n';
  for (const auto& c : per_category) {
    out << "category." << c.name << ".samples " << c.samples << '\n';
    out << "category." << c.name << ".mpjpe " << c.mpjpe << '\n';
    out << "category." << c.name << ".stress " << c.stress << '\n';
  }
  out.precision(precision);
  out.flags(flags);
}

}  // namespace kplift
