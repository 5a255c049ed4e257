#pragma once

#include <functional>
#include <iomanip>
#include <ostream>
#include <string>

#include "elf/ops.hpp"

namespace elf {

struct GradReport {
  std::string op_name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  int probe_count = 0;
  int degenerate_count = 0;  // probes where analytic and numeric are both ~0
  bool pass = false;
};

/// Probes where |analytic| and |numeric| both fall below this carry no signal
/// at f64: the difference is measurement noise, and a wrongly-zero analytic
/// gradient against a real one would still surface through the numeric side.
inline constexpr double kDegenerateGradCut = 1e-5;

namespace detail {

/// Without-replacement probe coordinates, deterministic in `seed`.
inline std::vector<Index> probe_coords(Index size, int want, std::uint64_t seed) {
  std::vector<Index> idx(static_cast<std::size_t>(size));
  for (Index i = 0; i < size; ++i) idx[static_cast<std::size_t>(i)] = i;
  std::uint64_t state = seed ^ 0xA5A5A5A55A5A5A5Aull;
  const Index take = std::min<Index>(want, size);
  for (Index i = 0; i < take; ++i) {
    const Index j = i + static_cast<Index>(splitmix64(state) % static_cast<std::uint64_t>(size - i));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(take));
  return idx;
}

}  // namespace detail

/// Compare a supplied analytic gradient against central finite differences of
/// `fn` at `x` on a random probe subset. `fn` must be pure and evaluable on
/// untracked tensors. h_i = h_scale * max(1, |x_i|). Two central differences
/// (h and 2h) are Richardson-combined so truncation error decays as h^4;
/// plain (f(x+h)-f(x-h))/(2h) is too coarse for the near-cancelling gradient
/// directions that attention compositions produce.
template <typename S>
GradReport finite_diff_compare(const std::string& op_name,
                               const std::function<Tensor<S>(const Tensor<S>&)>& fn,
                               const Tensor<S>& x, const Tensor<S>& analytic, S h_scale, S tol,
                               int probes, std::uint64_t seed = 0) {
  require(analytic.size() == x.size(), "finite_diff_compare: gradient/input size mismatch");
  GradReport report;
  report.op_name = op_name;
  const auto coords = detail::probe_coords(x.size(), static_cast<int>(x.size()),
                                           seed ^ fnv1a64(op_name));
  auto eval_at = [&](Index i, S value) {
    std::vector<S> v(x.values());
    v[static_cast<std::size_t>(i)] = value;
    return static_cast<double>(fn(Tensor<S>(x.shape(), std::move(v))).item());
  };
  for (Index i : coords) {
    if (report.probe_count >= probes) break;
    const S xi = x.at(i);
    const S h = h_scale * std::max(S(1), static_cast<S>(std::abs(static_cast<double>(xi))));
    const double d1 = eval_at(i, xi + h) - eval_at(i, xi - h);
    const double d2 = eval_at(i, xi + 2 * h) - eval_at(i, xi - 2 * h);
    const double fd = (8.0 * d1 - d2) / (12.0 * static_cast<double>(h));
    const double an = analytic.at(i);
    const double abs_err = std::abs(an - fd);
    if (abs_err != 0.0 && std::max(std::abs(an), std::abs(fd)) < kDegenerateGradCut) {
      ++report.degenerate_count;
      continue;
    }
    const double rel = abs_err / std::max({std::abs(an), std::abs(fd), 1e-8});
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    report.max_rel_error = std::max(report.max_rel_error, rel);
    ++report.probe_count;
  }
  report.pass = report.max_rel_error < static_cast<double>(tol);
  return report;
}

/// Full check: run `fn` under a fresh tape, take the reverse-mode gradient of
/// its scalar output w.r.t. x, and validate it against finite differences.
template <typename S>
GradReport finite_diff_check(const std::string& op_name,
                             const std::function<Tensor<S>(const Tensor<S>&)>& fn,
                             const Tensor<S>& x, S h_scale, S tol, int probes,
                             std::uint64_t seed = 0) {
  Tape<S> tape;
  Tensor<S> leaf = tape.leaf(x);
  Tensor<S> loss = fn(leaf);
  require(loss.size() == 1, "finite_diff_check: fn must return a scalar");
  tape.backward(loss);
  const Tensor<S> analytic = tape.grad(leaf);
  return finite_diff_compare(op_name, fn, x, analytic, h_scale, tol, probes, seed);
}

inline void print_report_row(std::ostream& os, const GradReport& r) {
  os << std::left << std::setw(34) << r.op_name << std::right << "  " << std::scientific
     << std::setprecision(3) << r.max_rel_error << "  " << r.max_abs_error << "  " << std::setw(5)
     << r.probe_count << "  " << (r.pass ? "pass" : "FAIL") << "\n";
}

inline void print_report_table(std::ostream& os, const std::vector<GradReport>& reports) {
  os << std::left << std::setw(34) << "op" << std::right << "  " << std::setw(9) << "max_rel"
     << "  " << std::setw(9) << "max_abs" << "  " << std::setw(5) << "n" << "  " << "result\n";
  for (const GradReport& r : reports) print_report_row(os, r);
}

}  // namespace elf
