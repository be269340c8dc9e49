#pragma once

#include "mmfuse/e3d_msca.hpp"
#include "mmfuse/ops.hpp"

namespace mmfuse {

// ----------------------------------------------------------------------------
// Uniform clamped B-spline grid on [-range, range].
//
// Knots extend `degree` steps past each end so the basis forms a partition of
// unity on the whole core interval. basis_count = grid_size + degree; inputs
// are clamped to the range before evaluation.
// ----------------------------------------------------------------------------

struct BSplineGrid {
  std::size_t degree = 3;
  std::size_t grid_size = 8;
  double range = 3.0;
  std::vector<double> knots;  // grid_size + 2*degree + 1, uniform

  static BSplineGrid make(std::size_t degree, std::size_t grid_size, double range) {
    if (degree < 1) throw ConfigError("kan: spline degree must be >= 1");
    if (grid_size < degree + 1) {
      throw ConfigError("kan: grid size " + std::to_string(grid_size) + " must be >= degree+1 (" +
                        std::to_string(degree + 1) + ")");
    }
    if (!(range > 0.0)) throw ConfigError("kan: range must be positive");
    BSplineGrid g;
    g.degree = degree;
    g.grid_size = grid_size;
    g.range = range;
    double h = 2.0 * range / static_cast<double>(grid_size);
    g.knots.resize(grid_size + 2 * degree + 1);
    for (std::size_t j = 0; j < g.knots.size(); ++j) {
      g.knots[j] = -range + (static_cast<double>(j) - static_cast<double>(degree)) * h;
    }
    return g;
  }

  void validate() const {
    if (degree < 1 || grid_size < degree + 1 || knots.size() != grid_size + 2 * degree + 1) {
      throw ConfigError("kan: malformed spline grid");
    }
    for (std::size_t j = 1; j < knots.size(); ++j) {
      if (knots[j] < knots[j - 1]) throw ConfigError("kan: knot vector must be non-decreasing");
    }
  }

  std::size_t basis_count() const { return grid_size + degree; }

  // Knot span s with t[s] <= x < t[s+1], clamped to the core interval.
  std::size_t span_of(double x) const {
    double h = 2.0 * range / static_cast<double>(grid_size);
    double pos = (x + range) / h;
    long cell = static_cast<long>(std::floor(pos));
    if (cell < 0) cell = 0;
    if (cell > static_cast<long>(grid_size) - 1) cell = static_cast<long>(grid_size) - 1;
    return degree + static_cast<std::size_t>(cell);
  }

  // Cox-de Boor: nonzero basis values B_{span-degree .. span}(x) into n[0..degree].
  std::size_t eval_basis(double x, double* n) const {
    std::size_t s = span_of(x);
    double left[16], right[16];
    n[0] = 1.0;
    for (std::size_t d = 1; d <= degree; ++d) {
      left[d] = x - knots[s + 1 - d];
      right[d] = knots[s + d] - x;
      double saved = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        double tmp = n[j] / (right[j + 1] + left[d - j]);
        n[j] = saved + right[j + 1] * tmp;
        saved = left[d - j] * tmp;
      }
      n[d] = saved;
    }
    return s;
  }

  // Values and first derivatives of the nonzero basis functions at x.
  std::size_t eval_basis_deriv(double x, double* n, double* dn) const {
    std::size_t s = span_of(x);
    // Degree (k-1) basis at the same span: nonzero are B_{s-k+1 .. s, k-1}.
    double lower[16];
    lower[0] = 1.0;
    double left[16], right[16];
    for (std::size_t d = 1; d + 1 <= degree; ++d) {
      left[d] = x - knots[s + 1 - d];
      right[d] = knots[s + d] - x;
      double saved = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        double tmp = lower[j] / (right[j + 1] + left[d - j]);
        lower[j] = saved + right[j + 1] * tmp;
        saved = left[d - j] * tmp;
      }
      lower[d] = saved;
    }
    double k = static_cast<double>(degree);
    for (std::size_t j = 0; j <= degree; ++j) {
      std::size_t i = s - degree + j;
      double b_i = (j >= 1) ? lower[j - 1] : 0.0;       // B_{i, k-1}
      double b_i1 = (j <= degree - 1) ? lower[j] : 0.0;  // B_{i+1, k-1}
      dn[j] = k * (b_i / (knots[i + degree] - knots[i]) -
                   b_i1 / (knots[i + degree + 1] - knots[i + 1]));
    }
    return eval_basis(x, n);
  }
};

// Full-length basis vector (mostly zeros); convenient for tests and oracles.
inline std::vector<double> spline_basis_full(const BSplineGrid& g, double x) {
  std::vector<double> out(g.basis_count(), 0.0);
  double xc = std::min(g.range, std::max(-g.range, x));
  double n[16];
  std::size_t s = g.eval_basis(xc, n);
  for (std::size_t j = 0; j <= g.degree; ++j) out[s - g.degree + j] = n[j];
  return out;
}

// ----------------------------------------------------------------------------
// KAN layer: y_j = sum_i phi_ij(x_i), each phi a learned spline plus a base
// linear term. Spline inputs are clamped to the knot range; the base term
// sees the raw input.
// ----------------------------------------------------------------------------

struct KanLayerParams {
  BSplineGrid grid;
  Tensor coeff;   // [n_in, n_out, basis_count]
  Tensor base_w;  // [n_in, n_out]
};

inline KanLayerParams make_kan_layer(std::size_t n_in, std::size_t n_out, const BSplineGrid& grid,
                                     Rng& rng) {
  grid.validate();
  KanLayerParams p;
  p.grid = grid;
  p.coeff = init::weight({n_in, n_out, grid.basis_count()}, n_in, rng);
  p.base_w = init::weight({n_in, n_out}, n_in, rng);
  return p;
}

inline Tensor kan_layer_forward(const Tensor& x, const KanLayerParams& p) {
  p.grid.validate();
  if (x.rank() != 2) throw ShapeError("kan: input must be [B,n_in], got " + shape_str(x.shape()));
  std::size_t B = x.extent(0), n_in = x.extent(1);
  if (p.coeff.extent(0) != n_in || p.base_w.extent(0) != n_in) {
    throw ShapeError("kan: layer expects " + std::to_string(p.coeff.extent(0)) +
                     " inputs, got " + std::to_string(n_in));
  }
  std::size_t n_out = p.coeff.extent(1);
  std::size_t nb = p.coeff.extent(2);
  std::size_t k = p.grid.degree;
  double r = p.grid.range;

  // Active basis values/derivatives per (b, i), reused by the backward pass.
  std::vector<double> basis(B * n_in * (k + 1));
  std::vector<double> dbasis(B * n_in * (k + 1));
  std::vector<std::size_t> first(B * n_in);   // first active basis index
  std::vector<char> interior(B * n_in);       // strictly inside the knot range

  const auto& dx = x.data();
  const auto& cv = p.coeff.data();
  const auto& bw = p.base_w.data();
  std::vector<double> out(B * n_out, 0.0);

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < n_in; ++i) {
      double raw = dx[b * n_in + i];
      double xc = std::min(r, std::max(-r, raw));
      std::size_t cell = b * n_in + i;
      std::size_t s = p.grid.eval_basis_deriv(xc, &basis[cell * (k + 1)], &dbasis[cell * (k + 1)]);
      first[cell] = s - k;
      interior[cell] = (raw > -r && raw < r) ? 1 : 0;
      const double* nvals = &basis[cell * (k + 1)];
      for (std::size_t j = 0; j < n_out; ++j) {
        double acc = bw[i * n_out + j] * raw;
        const double* crow = cv.data() + (i * n_out + j) * nb + first[cell];
        for (std::size_t t = 0; t <= k; ++t) acc += crow[t] * nvals[t];
        out[b * n_out + j] += acc;
      }
    }
  }

  auto xn = x.node();
  auto cn = p.coeff.node();
  auto bn = p.base_w.node();
  return make_op(
      "kan_layer", Shape{B, n_out}, std::move(out), {x, p.coeff, p.base_w},
      [xn, cn, bn, basis = std::move(basis), dbasis = std::move(dbasis), first = std::move(first),
       interior = std::move(interior), B, n_in, n_out, nb, k](Tensor::Node& o) {
        bool gx = xn->requires_grad, gc = cn->requires_grad, gb = bn->requires_grad;
        if (gx) xn->ensure_grad();
        if (gc) cn->ensure_grad();
        if (gb) bn->ensure_grad();
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t i = 0; i < n_in; ++i) {
            std::size_t cell = b * n_in + i;
            const double* nvals = &basis[cell * (k + 1)];
            const double* dvals = &dbasis[cell * (k + 1)];
            double raw = xn->data[b * n_in + i];
            double dx_acc = 0.0;
            for (std::size_t j = 0; j < n_out; ++j) {
              double go = o.grad[b * n_out + j];
              if (go == 0.0) continue;
              std::size_t base_idx = (i * n_out + j) * nb + first[cell];
              if (gc) {
                for (std::size_t t = 0; t <= k; ++t) cn->grad[base_idx + t] += go * nvals[t];
              }
              if (gb) bn->grad[i * n_out + j] += go * raw;
              if (gx) {
                double slope = bn->data[i * n_out + j];
                if (interior[cell]) {
                  const double* crow = cn->data.data() + base_idx;
                  for (std::size_t t = 0; t <= k; ++t) slope += crow[t] * dvals[t];
                }
                dx_acc += go * slope;
              }
            }
            if (gx) xn->grad[b * n_in + i] += dx_acc;
          }
        }
      });
}

}  // namespace mmfuse
