#include "bzf/graph.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <mutex>
#include <shared_mutex>

#include "bzf/bilinear_kernel.hpp"

namespace bzf {

namespace {

std::deque<OpDef>& registry() {
  static std::deque<OpDef> r;
  return r;
}

std::shared_mutex& registry_mutex() {
  static std::shared_mutex m;
  return m;
}

void check_finite(const Tensor& t, int node_id, const std::string& what) {
  for (double v : t.data) {
    if (!std::isfinite(v)) {
      throw NonFiniteError("non-finite " + what + " at node " +
                               std::to_string(node_id),
                           node_id);
    }
  }
}

// C(m,n) (+)= A(m,k) * B(k,n)
void gemm(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(m,n) (+)= A(m,k) * B(n,k)^T
void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C(m,n) (+)= A(k,m)^T * B(k,n)
void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const double* arow = a + static_cast<size_t>(p) * m;
    const double* brow = b + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

Shape require_same(const std::vector<Shape>& in, const char* op) {
  if (in.size() < 2) throw Error(std::string(op) + ": needs two inputs");
  if (in[0] != in[1]) {
    throw Error(std::string(op) + ": shape mismatch " + shape_str(in[0]) +
                " vs " + shape_str(in[1]));
  }
  return in[0];
}

using Fwd = std::vector<const Tensor*>;

int op_add() {
  static int id = register_op(
      {"add",
       [](const std::vector<Shape>& in, const Attrs&) {
         return require_same(in, "add");
       },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         for (int64_t i = 0; i < out.numel(); ++i)
           out.data[i] = in[0]->data[i] + in[1]->data[i];
       },
       [](const Fwd&, const Attrs&, const Tensor&, const std::vector<double>&,
          const Tensor& g, const std::vector<Tensor*>& gin) {
         for (int k = 0; k < 2; ++k) {
           if (!gin[k]) continue;
           for (int64_t i = 0; i < g.numel(); ++i) gin[k]->data[i] += g.data[i];
         }
       }});
  return id;
}

int op_sub() {
  static int id = register_op(
      {"sub",
       [](const std::vector<Shape>& in, const Attrs&) {
         return require_same(in, "sub");
       },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         for (int64_t i = 0; i < out.numel(); ++i)
           out.data[i] = in[0]->data[i] - in[1]->data[i];
       },
       [](const Fwd&, const Attrs&, const Tensor&, const std::vector<double>&,
          const Tensor& g, const std::vector<Tensor*>& gin) {
         if (gin[0])
           for (int64_t i = 0; i < g.numel(); ++i) gin[0]->data[i] += g.data[i];
         if (gin[1])
           for (int64_t i = 0; i < g.numel(); ++i) gin[1]->data[i] -= g.data[i];
       }});
  return id;
}

int op_mul() {
  static int id = register_op(
      {"mul",
       [](const std::vector<Shape>& in, const Attrs&) {
         return require_same(in, "mul");
       },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         for (int64_t i = 0; i < out.numel(); ++i)
           out.data[i] = in[0]->data[i] * in[1]->data[i];
       },
       [](const Fwd& in, const Attrs&, const Tensor&,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         if (gin[0])
           for (int64_t i = 0; i < g.numel(); ++i)
             gin[0]->data[i] += g.data[i] * in[1]->data[i];
         if (gin[1])
           for (int64_t i = 0; i < g.numel(); ++i)
             gin[1]->data[i] += g.data[i] * in[0]->data[i];
       }});
  return id;
}

int op_div() {
  static int id = register_op(
      {"div",
       [](const std::vector<Shape>& in, const Attrs&) {
         return require_same(in, "div");
       },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         for (int64_t i = 0; i < out.numel(); ++i)
           out.data[i] = in[0]->data[i] / in[1]->data[i];
       },
       [](const Fwd& in, const Attrs&, const Tensor&,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         for (int64_t i = 0; i < g.numel(); ++i) {
           const double b = in[1]->data[i];
           if (gin[0]) gin[0]->data[i] += g.data[i] / b;
           if (gin[1]) gin[1]->data[i] -= g.data[i] * in[0]->data[i] / (b * b);
         }
       }});
  return id;
}

int op_neg() {
  static int id = register_op(
      {"neg",
       [](const std::vector<Shape>& in, const Attrs&) { return in[0]; },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = -in[0]->data[i];
       },
       [](const Fwd&, const Attrs&, const Tensor&, const std::vector<double>&,
          const Tensor& g, const std::vector<Tensor*>& gin) {
         if (gin[0])
           for (int64_t i = 0; i < g.numel(); ++i) gin[0]->data[i] -= g.data[i];
       }});
  return id;
}

int op_scale() {
  static int id = register_op(
      {"scale",
       [](const std::vector<Shape>& in, const Attrs&) { return in[0]; },
       [](const Fwd& in, const Attrs& a, Tensor& out, std::vector<double>&) {
         const double s = a.fv[0];
         for (int64_t i = 0; i < out.numel(); ++i)
           out.data[i] = s * in[0]->data[i];
       },
       [](const Fwd&, const Attrs& a, const Tensor&, const std::vector<double>&,
          const Tensor& g, const std::vector<Tensor*>& gin) {
         if (!gin[0]) return;
         const double s = a.fv[0];
         for (int64_t i = 0; i < g.numel(); ++i)
           gin[0]->data[i] += s * g.data[i];
       }});
  return id;
}

int op_add_scalar() {
  static int id = register_op(
      {"add_scalar",
       [](const std::vector<Shape>& in, const Attrs&) { return in[0]; },
       [](const Fwd& in, const Attrs& a, Tensor& out, std::vector<double>&) {
         const double c = a.fv[0];
         for (int64_t i = 0; i < out.numel(); ++i)
           out.data[i] = in[0]->data[i] + c;
       },
       [](const Fwd&, const Attrs&, const Tensor&, const std::vector<double>&,
          const Tensor& g, const std::vector<Tensor*>& gin) {
         if (gin[0])
           for (int64_t i = 0; i < g.numel(); ++i) gin[0]->data[i] += g.data[i];
       }});
  return id;
}

int op_relu() {
  static int id = register_op(
      {"relu",
       [](const std::vector<Shape>& in, const Attrs&) { return in[0]; },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         for (int64_t i = 0; i < out.numel(); ++i)
           out.data[i] = in[0]->data[i] > 0.0 ? in[0]->data[i] : 0.0;
       },
       [](const Fwd& in, const Attrs&, const Tensor&,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         if (!gin[0]) return;
         for (int64_t i = 0; i < g.numel(); ++i)
           if (in[0]->data[i] > 0.0) gin[0]->data[i] += g.data[i];
       }});
  return id;
}

int op_sigmoid() {
  static int id = register_op(
      {"sigmoid",
       [](const std::vector<Shape>& in, const Attrs&) { return in[0]; },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         for (int64_t i = 0; i < out.numel(); ++i) {
           const double x = in[0]->data[i];
           out.data[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                  : std::exp(x) / (1.0 + std::exp(x));
         }
       },
       [](const Fwd&, const Attrs&, const Tensor& out,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         if (!gin[0]) return;
         for (int64_t i = 0; i < g.numel(); ++i) {
           const double y = out.data[i];
           gin[0]->data[i] += g.data[i] * y * (1.0 - y);
         }
       }});
  return id;
}

int op_exp() {
  static int id = register_op(
      {"exp", [](const std::vector<Shape>& in, const Attrs&) { return in[0]; },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         for (int64_t i = 0; i < out.numel(); ++i)
           out.data[i] = std::exp(in[0]->data[i]);
       },
       [](const Fwd&, const Attrs&, const Tensor& out,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         if (gin[0])
           for (int64_t i = 0; i < g.numel(); ++i)
             gin[0]->data[i] += g.data[i] * out.data[i];
       }});
  return id;
}

int op_log() {
  static int id = register_op(
      {"log", [](const std::vector<Shape>& in, const Attrs&) { return in[0]; },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         for (int64_t i = 0; i < out.numel(); ++i)
           out.data[i] = std::log(in[0]->data[i]);
       },
       [](const Fwd& in, const Attrs&, const Tensor&,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         if (gin[0])
           for (int64_t i = 0; i < g.numel(); ++i)
             gin[0]->data[i] += g.data[i] / in[0]->data[i];
       }});
  return id;
}

int op_sqrt() {
  static int id = register_op(
      {"sqrt", [](const std::vector<Shape>& in, const Attrs&) { return in[0]; },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         for (int64_t i = 0; i < out.numel(); ++i)
           out.data[i] = std::sqrt(in[0]->data[i]);
       },
       [](const Fwd&, const Attrs&, const Tensor& out,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         if (!gin[0]) return;
         // subgradient 0 at the origin
         for (int64_t i = 0; i < g.numel(); ++i)
           if (out.data[i] > 0.0)
             gin[0]->data[i] += g.data[i] * 0.5 / out.data[i];
       }});
  return id;
}

int op_abs() {
  static int id = register_op(
      {"abs", [](const std::vector<Shape>& in, const Attrs&) { return in[0]; },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         for (int64_t i = 0; i < out.numel(); ++i)
           out.data[i] = std::fabs(in[0]->data[i]);
       },
       [](const Fwd& in, const Attrs&, const Tensor&,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         if (!gin[0]) return;
         for (int64_t i = 0; i < g.numel(); ++i) {
           const double x = in[0]->data[i];
           if (x > 0.0)
             gin[0]->data[i] += g.data[i];
           else if (x < 0.0)
             gin[0]->data[i] -= g.data[i];
         }
       }});
  return id;
}

int op_square() {
  static int id = register_op(
      {"square",
       [](const std::vector<Shape>& in, const Attrs&) { return in[0]; },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         for (int64_t i = 0; i < out.numel(); ++i)
           out.data[i] = in[0]->data[i] * in[0]->data[i];
       },
       [](const Fwd& in, const Attrs&, const Tensor&,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         if (gin[0])
           for (int64_t i = 0; i < g.numel(); ++i)
             gin[0]->data[i] += 2.0 * g.data[i] * in[0]->data[i];
       }});
  return id;
}

int op_sum() {
  static int id = register_op(
      {"sum",
       [](const std::vector<Shape>&, const Attrs&) { return Shape{}; },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         double acc = 0.0;
         for (double v : in[0]->data) acc += v;
         out.data[0] = acc;
       },
       [](const Fwd&, const Attrs&, const Tensor&, const std::vector<double>&,
          const Tensor& g, const std::vector<Tensor*>& gin) {
         if (gin[0])
           for (auto& v : gin[0]->data) v += g.data[0];
       }});
  return id;
}

int op_mean() {
  static int id = register_op(
      {"mean",
       [](const std::vector<Shape>& in, const Attrs&) {
         if (shape_numel(in[0]) == 0) throw Error("mean: empty input");
         return Shape{};
       },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         double acc = 0.0;
         for (double v : in[0]->data) acc += v;
         out.data[0] = acc / static_cast<double>(in[0]->numel());
       },
       [](const Fwd& in, const Attrs&, const Tensor&,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         if (!gin[0]) return;
         const double s = g.data[0] / static_cast<double>(in[0]->numel());
         for (auto& v : gin[0]->data) v += s;
       }});
  return id;
}

int op_matmul() {
  static int id = register_op(
      {"matmul",
       [](const std::vector<Shape>& in, const Attrs&) {
         if (in[0].size() != 2 || in[1].size() != 2 || in[0][1] != in[1][0])
           throw Error("matmul: incompatible shapes " + shape_str(in[0]) +
                       " x " + shape_str(in[1]));
         return Shape{in[0][0], in[1][1]};
       },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         std::fill(out.data.begin(), out.data.end(), 0.0);
         gemm(in[0]->data.data(), in[1]->data.data(), out.data.data(),
              in[0]->shape[0], in[0]->shape[1], in[1]->shape[1]);
       },
       [](const Fwd& in, const Attrs&, const Tensor&,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         const int m = in[0]->shape[0], k = in[0]->shape[1],
                   n = in[1]->shape[1];
         if (gin[0])
           gemm_nt(g.data.data(), in[1]->data.data(), gin[0]->data.data(), m, n,
                   k);
         if (gin[1])
           gemm_tn(in[0]->data.data(), g.data.data(), gin[1]->data.data(), n, m,
                   k);
       }});
  return id;
}

int op_transpose() {
  static int id = register_op(
      {"transpose",
       [](const std::vector<Shape>& in, const Attrs&) {
         if (in[0].size() != 2) throw Error("transpose: rank-2 input required");
         return Shape{in[0][1], in[0][0]};
       },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         const int r = in[0]->shape[0], c = in[0]->shape[1];
         for (int i = 0; i < r; ++i)
           for (int j = 0; j < c; ++j) out.at2(j, i) = in[0]->at2(i, j);
       },
       [](const Fwd& in, const Attrs&, const Tensor&,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         if (!gin[0]) return;
         const int r = in[0]->shape[0], c = in[0]->shape[1];
         for (int i = 0; i < r; ++i)
           for (int j = 0; j < c; ++j) gin[0]->at2(i, j) += g.at2(j, i);
       }});
  return id;
}

int op_add_row() {
  static int id = register_op(
      {"add_row",
       [](const std::vector<Shape>& in, const Attrs&) {
         if (in[0].size() != 2 || in[1].size() != 1 || in[0][1] != in[1][0])
           throw Error("add_row: want (r,c) + (c)");
         return in[0];
       },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         const int r = in[0]->shape[0], c = in[0]->shape[1];
         for (int i = 0; i < r; ++i)
           for (int j = 0; j < c; ++j)
             out.at2(i, j) = in[0]->at2(i, j) + in[1]->data[j];
       },
       [](const Fwd& in, const Attrs&, const Tensor&,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         const int r = in[0]->shape[0], c = in[0]->shape[1];
         if (gin[0])
           for (int64_t i = 0; i < g.numel(); ++i)
             gin[0]->data[i] += g.data[i];
         if (gin[1])
           for (int i = 0; i < r; ++i)
             for (int j = 0; j < c; ++j) gin[1]->data[j] += g.at2(i, j);
       }});
  return id;
}

int op_softmax_rows() {
  static int id = register_op(
      {"softmax_rows",
       [](const std::vector<Shape>& in, const Attrs&) {
         if (in[0].size() < 1 || in[0].size() > 2)
           throw Error("softmax_rows: rank-1 or rank-2 input required");
         return in[0];
       },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         const int r = in[0]->rank() == 2 ? in[0]->shape[0] : 1;
         const int c = in[0]->rank() == 2 ? in[0]->shape[1] : in[0]->shape[0];
         for (int i = 0; i < r; ++i) {
           const double* x = in[0]->data.data() + static_cast<size_t>(i) * c;
           double* y = out.data.data() + static_cast<size_t>(i) * c;
           double mx = x[0];
           for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
           double z = 0.0;
           for (int j = 0; j < c; ++j) {
             y[j] = std::exp(x[j] - mx);
             z += y[j];
           }
           for (int j = 0; j < c; ++j) y[j] /= z;
         }
       },
       [](const Fwd& in, const Attrs&, const Tensor& out,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         if (!gin[0]) return;
         const int r = in[0]->rank() == 2 ? in[0]->shape[0] : 1;
         const int c = in[0]->rank() == 2 ? in[0]->shape[1] : in[0]->shape[0];
         for (int i = 0; i < r; ++i) {
           const double* y = out.data.data() + static_cast<size_t>(i) * c;
           const double* gy = g.data.data() + static_cast<size_t>(i) * c;
           double* gx = gin[0]->data.data() + static_cast<size_t>(i) * c;
           double dot = 0.0;
           for (int j = 0; j < c; ++j) dot += gy[j] * y[j];
           for (int j = 0; j < c; ++j) gx[j] += y[j] * (gy[j] - dot);
         }
       }});
  return id;
}

int op_reshape() {
  static int id = register_op(
      {"reshape",
       [](const std::vector<Shape>& in, const Attrs& a) {
         Shape s(a.iv.begin(), a.iv.end());
         if (shape_numel(s) != shape_numel(in[0]))
           throw Error("reshape: numel mismatch");
         return s;
       },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         out.data = in[0]->data;
       },
       [](const Fwd&, const Attrs&, const Tensor&, const std::vector<double>&,
          const Tensor& g, const std::vector<Tensor*>& gin) {
         if (gin[0])
           for (int64_t i = 0; i < g.numel(); ++i) gin[0]->data[i] += g.data[i];
       }});
  return id;
}

int op_concat_rows() {
  static int id = register_op(
      {"concat_rows",
       [](const std::vector<Shape>& in, const Attrs&) {
         if (in.empty()) throw Error("concat_rows: no inputs");
         int rows = 0;
         for (const auto& s : in) {
           if (s.size() != 2 || s[1] != in[0][1])
             throw Error("concat_rows: rank-2 inputs with equal columns");
           rows += s[0];
         }
         return Shape{rows, in[0][1]};
       },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         size_t off = 0;
         for (const Tensor* t : in) {
           std::copy(t->data.begin(), t->data.end(), out.data.begin() + off);
           off += t->data.size();
         }
       },
       [](const Fwd& in, const Attrs&, const Tensor&,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         size_t off = 0;
         for (size_t k = 0; k < in.size(); ++k) {
           const size_t n = in[k]->data.size();
           if (gin[k])
             for (size_t i = 0; i < n; ++i) gin[k]->data[i] += g.data[off + i];
           off += n;
         }
       }});
  return id;
}

int op_gather_rows() {
  static int id = register_op(
      {"gather_rows",
       [](const std::vector<Shape>& in, const Attrs& a) {
         if (in[0].size() != 2) throw Error("gather_rows: rank-2 input");
         for (int64_t r : a.iv)
           if (r < 0 || r >= in[0][0]) throw Error("gather_rows: index range");
         return Shape{static_cast<int>(a.iv.size()), in[0][1]};
       },
       [](const Fwd& in, const Attrs& a, Tensor& out, std::vector<double>&) {
         const int c = in[0]->shape[1];
         for (size_t i = 0; i < a.iv.size(); ++i) {
           const double* src =
               in[0]->data.data() + static_cast<size_t>(a.iv[i]) * c;
           std::copy(src, src + c, out.data.data() + i * c);
         }
       },
       [](const Fwd& in, const Attrs& a, const Tensor&,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         if (!gin[0]) return;
         const int c = in[0]->shape[1];
         for (size_t i = 0; i < a.iv.size(); ++i) {
           double* dst =
               gin[0]->data.data() + static_cast<size_t>(a.iv[i]) * c;
           const double* src = g.data.data() + i * c;
           for (int j = 0; j < c; ++j) dst[j] += src[j];
         }
       }});
  return id;
}

int op_bilinear_sample() {
  static int id = register_op(
      {"bilinear_sample",
       [](const std::vector<Shape>& in, const Attrs&) {
         if (in[0].size() != 3) throw Error("bilinear_sample: map must be HxWxC");
         if (shape_numel(in[1]) != 2)
           throw Error("bilinear_sample: location must have 2 coordinates");
         return Shape{in[0][2]};
       },
       [](const Fwd& in, const Attrs&, Tensor& out, std::vector<double>&) {
         std::fill(out.data.begin(), out.data.end(), 0.0);
         detail::bilinear_value(in[0]->data.data(), in[0]->shape[0],
                                in[0]->shape[1], in[0]->shape[2],
                                in[1]->data[0], in[1]->data[1],
                                out.data.data());
       },
       [](const Fwd& in, const Attrs&, const Tensor&,
          const std::vector<double>&, const Tensor& g,
          const std::vector<Tensor*>& gin) {
         double gx = 0.0, gy = 0.0;
         detail::bilinear_backward(
             in[0]->data.data(), in[0]->shape[0], in[0]->shape[1],
             in[0]->shape[2], in[1]->data[0], in[1]->data[1], g.data.data(),
             gin[0] ? gin[0]->data.data() : nullptr, gin[1] ? &gx : nullptr,
             gin[1] ? &gy : nullptr);
         if (gin[1]) {
           gin[1]->data[0] += gx;
           gin[1]->data[1] += gy;
         }
       }});
  return id;
}

}  // namespace

int register_op(OpDef def) {
  std::unique_lock lock(registry_mutex());
  registry().push_back(std::move(def));
  return static_cast<int>(registry().size()) - 1;
}

const OpDef& op_def(int op_id) {
  std::shared_lock lock(registry_mutex());
  if (op_id < 0 || op_id >= static_cast<int>(registry().size()))
    throw Error("unknown op id " + std::to_string(op_id));
  return registry()[static_cast<size_t>(op_id)];
}

Value Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return Value{static_cast<int>(nodes_.size()) - 1};
}

Value Graph::input(const std::string& name, Tensor value) {
  if (inputs_.count(name) || params_.count(name))
    throw Error("duplicate input/param name: " + name);
  Node n;
  n.kind = NodeKind::Input;
  n.shape = value.shape;
  n.needs_grad = value.requires_grad;
  n.value = std::move(value);
  n.name = name;
  Value v = push(std::move(n));
  inputs_[name] = v.id;
  return v;
}

Value Graph::param(const std::string& name, Tensor value) {
  if (inputs_.count(name) || params_.count(name))
    throw Error("duplicate input/param name: " + name);
  Node n;
  n.kind = NodeKind::Param;
  n.shape = value.shape;
  n.needs_grad = true;
  n.value = std::move(value);
  n.name = name;
  Value v = push(std::move(n));
  params_[name] = v.id;
  return v;
}

Value Graph::constant(Tensor value) {
  Node n;
  n.kind = NodeKind::Const;
  n.shape = value.shape;
  n.value = std::move(value);
  return push(std::move(n));
}

Value Graph::apply(int op_id, const std::vector<Value>& args, Attrs attrs) {
  const OpDef& def = op_def(op_id);
  std::vector<Shape> arg_shapes;
  bool needs_grad = false;
  for (Value a : args) {
    if (a.id < 0 || a.id >= num_nodes())
      throw Error(def.name + ": argument node out of range");
    arg_shapes.push_back(nodes_[static_cast<size_t>(a.id)].shape);
    needs_grad = needs_grad || nodes_[static_cast<size_t>(a.id)].needs_grad;
  }
  Node n;
  n.kind = NodeKind::Op;
  n.op_id = op_id;
  for (Value a : args) n.args.push_back(a.id);
  n.shape = def.infer(arg_shapes, attrs);
  n.attrs = std::move(attrs);
  n.needs_grad = needs_grad;
  return push(std::move(n));
}

void Graph::mark_output(const std::string& name, Value v) {
  if (v.id < 0 || v.id >= num_nodes()) throw Error("mark_output: bad node");
  outputs_.emplace_back(name, v.id);
}

Value Graph::output(const std::string& name) const {
  for (const auto& [n, id] : outputs_)
    if (n == name) return Value{id};
  throw Error("unknown output: " + name);
}

Value Graph::primary_output() const {
  if (outputs_.empty()) throw Error("graph has no marked outputs");
  return Value{outputs_.front().second};
}

const Shape& Graph::shape_of(Value v) const {
  return nodes_[static_cast<size_t>(v.id)].shape;
}

Value Graph::add(Value a, Value b) { return apply(op_add(), {a, b}); }
Value Graph::sub(Value a, Value b) { return apply(op_sub(), {a, b}); }
Value Graph::mul(Value a, Value b) { return apply(op_mul(), {a, b}); }
Value Graph::div(Value a, Value b) { return apply(op_div(), {a, b}); }
Value Graph::neg(Value a) { return apply(op_neg(), {a}); }
Value Graph::scale(Value a, double s) {
  return apply(op_scale(), {a}, Attrs{{}, {s}});
}
Value Graph::add_scalar(Value a, double c) {
  return apply(op_add_scalar(), {a}, Attrs{{}, {c}});
}
Value Graph::relu(Value a) { return apply(op_relu(), {a}); }
Value Graph::sigmoid(Value a) { return apply(op_sigmoid(), {a}); }
Value Graph::exp(Value a) { return apply(op_exp(), {a}); }
Value Graph::log(Value a) { return apply(op_log(), {a}); }
Value Graph::sqrt(Value a) { return apply(op_sqrt(), {a}); }
Value Graph::abs(Value a) { return apply(op_abs(), {a}); }
Value Graph::square(Value a) { return apply(op_square(), {a}); }
Value Graph::sum(Value a) { return apply(op_sum(), {a}); }
Value Graph::mean(Value a) { return apply(op_mean(), {a}); }
Value Graph::matmul(Value a, Value b) { return apply(op_matmul(), {a, b}); }
Value Graph::transpose(Value a) { return apply(op_transpose(), {a}); }
Value Graph::add_row(Value m, Value row) {
  return apply(op_add_row(), {m, row});
}
Value Graph::softmax_rows(Value a) { return apply(op_softmax_rows(), {a}); }
Value Graph::reshape(Value a, Shape s) {
  Attrs attrs;
  attrs.iv.assign(s.begin(), s.end());
  return apply(op_reshape(), {a}, std::move(attrs));
}
Value Graph::concat_rows(const std::vector<Value>& parts) {
  return apply(op_concat_rows(), parts);
}
Value Graph::gather_rows(Value a, const std::vector<int64_t>& rows) {
  Attrs attrs;
  attrs.iv = rows;
  return apply(op_gather_rows(), {a}, std::move(attrs));
}
Value Graph::bilinear_sample(Value map, Value loc) {
  return apply(op_bilinear_sample(), {map, loc});
}

void eval_forward(const Graph& g, const NamedTensors& inputs,
                  const NamedTensors& param_overrides, EvalBuffers& buf) {
  const size_t n = static_cast<size_t>(g.num_nodes());
  buf.values.resize(n);
  buf.saved.resize(n);
  for (size_t i = buf.computed; i < n; ++i) {
    const auto& node = g.node(static_cast<int>(i));
    switch (node.kind) {
      case Graph::NodeKind::Input: {
        auto it = inputs.find(node.name);
        const Tensor& src = it != inputs.end() ? it->second : node.value;
        if (src.shape != node.shape)
          throw Error("input '" + node.name + "' expects shape " +
                      shape_str(node.shape) + ", got " + shape_str(src.shape));
        buf.values[i] = src;
        break;
      }
      case Graph::NodeKind::Param: {
        auto it = param_overrides.find(node.name);
        const Tensor& src = it != param_overrides.end() ? it->second : node.value;
        if (src.shape != node.shape)
          throw Error("param '" + node.name + "' expects shape " +
                      shape_str(node.shape) + ", got " + shape_str(src.shape));
        buf.values[i] = src;
        break;
      }
      case Graph::NodeKind::Const:
        buf.values[i] = node.value;
        break;
      case Graph::NodeKind::Op: {
        const OpDef& def = op_def(node.op_id);
        std::vector<const Tensor*> args;
        args.reserve(node.args.size());
        for (int a : node.args) args.push_back(&buf.values[static_cast<size_t>(a)]);
        Tensor out = Tensor::zeros(node.shape);
        buf.saved[i].clear();
        def.forward(args, node.attrs, out, buf.saved[i]);
        buf.values[i] = std::move(out);
        break;
      }
    }
    check_finite(buf.values[i], static_cast<int>(i), "value");
  }
  buf.computed = n;
}

std::vector<Tensor> backward_from(const Graph& g, const EvalBuffers& buf,
                                  Value root, const Tensor& seed) {
  if (buf.computed != static_cast<size_t>(g.num_nodes()))
    throw Error("backward_from: forward pass incomplete");
  const auto& root_node = g.node(root.id);
  if (seed.shape != root_node.shape)
    throw Error("seed shape " + shape_str(seed.shape) +
                " does not match output shape " + shape_str(root_node.shape));
  std::vector<Tensor> grads(static_cast<size_t>(g.num_nodes()));
  grads[static_cast<size_t>(root.id)] = seed;
  for (int i = root.id; i >= 0; --i) {
    const auto& node = g.node(i);
    auto& gi = grads[static_cast<size_t>(i)];
    if (gi.data.empty() || node.kind != Graph::NodeKind::Op) continue;
    if (!node.needs_grad) continue;
    const OpDef& def = op_def(node.op_id);
    std::vector<const Tensor*> args;
    std::vector<Tensor*> gin;
    for (int a : node.args) {
      const auto& an = g.node(a);
      args.push_back(&buf.values[static_cast<size_t>(a)]);
      if (an.needs_grad) {
        auto& ga = grads[static_cast<size_t>(a)];
        if (ga.data.empty()) ga = Tensor::zeros(an.shape);
        gin.push_back(&ga);
      } else {
        gin.push_back(nullptr);
      }
    }
    def.backward(args, node.attrs, buf.values[static_cast<size_t>(i)],
                 buf.saved[static_cast<size_t>(i)], gi, gin);
    for (size_t k = 0; k < gin.size(); ++k) {
      if (gin[k]) check_finite(*gin[k], node.args[k], "gradient");
    }
  }
  return grads;
}

EvalResult eval_and_backward(const Graph& g, const NamedTensors& inputs,
                             const Tensor& seed,
                             const NamedTensors& param_overrides) {
  EvalBuffers buf;
  eval_forward(g, inputs, param_overrides, buf);
  auto grads = backward_from(g, buf, g.primary_output(), seed);
  EvalResult res;
  for (const auto& [name, id] : g.outputs())
    res.outputs[name] = buf.values[static_cast<size_t>(id)];
  auto take = [&](const std::string& name, int id) {
    auto& t = grads[static_cast<size_t>(id)];
    res.grads[name] =
        t.data.empty() ? Tensor::zeros(g.node(id).shape) : std::move(t);
  };
  for (const auto& [name, id] : g.params()) take(name, id);
  for (const auto& [name, id] : g.inputs())
    if (g.node(id).needs_grad) take(name, id);
  return res;
}

double grad_check(const Graph& g, const NamedTensors& point, double step) {
  if (step <= 0.0) throw Error("grad_check: step must be positive");
  Value out = g.primary_output();
  if (shape_numel(g.shape_of(out)) != 1)
    throw Error("grad_check: output must be scalar-valued");

  NamedTensors inputs, overrides;
  for (const auto& [name, t] : point) {
    if (g.inputs().count(name))
      inputs[name] = t;
    else if (g.params().count(name))
      overrides[name] = t;
    else
      throw Error("grad_check: unknown name '" + name + "'");
  }

  Tensor seed = Tensor::full(g.shape_of(out), 1.0);
  EvalResult res = eval_and_backward(g, inputs, seed, overrides);

  auto value_at = [&](const NamedTensors& in, const NamedTensors& ov) {
    EvalBuffers buf;
    eval_forward(g, in, ov, buf);
    return buf.values[static_cast<size_t>(out.id)].data[0];
  };

  // Every parameter plus every requires_grad input, coordinate by coordinate.
  std::vector<std::pair<std::string, bool>> targets;  // (name, is_input)
  for (const auto& [name, id] : g.params()) {
    (void)id;
    targets.emplace_back(name, false);
  }
  for (const auto& [name, id] : g.inputs())
    if (g.node(id).needs_grad) targets.emplace_back(name, true);

  double max_rel = 0.0;
  for (const auto& [name, is_input] : targets) {
    const int id = is_input ? g.inputs().at(name) : g.params().at(name);
    Tensor base;
    if (auto it = point.find(name); it != point.end())
      base = it->second;
    else
      base = g.node(id).value;
    const Tensor& analytic = res.grads.at(name);
    for (int64_t i = 0; i < base.numel(); ++i) {
      Tensor lo = base, hi = base;
      hi.data[static_cast<size_t>(i)] += step;
      lo.data[static_cast<size_t>(i)] -= step;
      NamedTensors in = inputs, ov = overrides;
      auto& slot = is_input ? in : ov;
      slot[name] = hi;
      const double f_hi = value_at(in, ov);
      slot[name] = lo;
      const double f_lo = value_at(in, ov);
      const double fd = (f_hi - f_lo) / (2.0 * step);
      const double rel = std::fabs(analytic.data[static_cast<size_t>(i)] - fd) /
                         std::max(1.0, std::fabs(fd));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace bzf
