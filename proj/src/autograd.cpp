#include "dpclip/autograd.hpp"

#include "dpclip/errors.hpp"

#include <cmath>
#include <unordered_set>

namespace dpclip {

namespace {

thread_local bool g_grad_enabled = true;

std::string shape_str(const Mat& m) {
    return "[" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + "]";
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                         shape_str(b.value()));
    }
}

void push(Node& self, std::size_t i, const Mat& g) {
    auto& p = self.parents[i];
    if (p->requires_grad) p->accumulate(g);
}

}  // namespace

void Node::accumulate(const Mat& g) {
    if (grad.size() == 0) {
        grad = g;
    } else {
        grad += g;
    }
}

Var::Var(Mat value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

double Var::item() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("item() on non-scalar " + shape_str(value()));
    return node_->value(0, 0);
}

void Var::backward() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("backward() requires a scalar, got " + shape_str(value()));
    if (!node_->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->accumulate(Mat::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->backward_fn || n->grad.size() == 0) continue;
        n->backward_fn(*n);
        n->grad.resize(0, 0);
    }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var constant(Mat value) { return Var(std::move(value), false); }

Var make_op(Mat value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    Var out(std::move(value), false);
    if (!g_grad_enabled) return out;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward_fn = std::move(fn);
    return out;
}

namespace ops {

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + shape_str(a.value()) + " x " + shape_str(b.value()));
    }
    Mat out = a.value() * b.value();
    return make_op(std::move(out), {a, b}, [](Node& self) {
        const Mat& A = self.parents[0]->value;
        const Mat& B = self.parents[1]->value;
        if (self.parents[0]->requires_grad) push(self, 0, self.grad * B.transpose());
        if (self.parents[1]->requires_grad) push(self, 1, A.transpose() * self.grad);
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: " + shape_str(a.value()) + " x " + shape_str(b.value()) + "^T");
    }
    Mat out = a.value() * b.value().transpose();
    return make_op(std::move(out), {a, b}, [](Node& self) {
        const Mat& A = self.parents[0]->value;
        const Mat& B = self.parents[1]->value;
        if (self.parents[0]->requires_grad) push(self, 0, self.grad * B);
        if (self.parents[1]->requires_grad) push(self, 1, self.grad.transpose() * A);
    });
}

Var linear(const Var& x, const Var& weight, const Var* bias) {
    Var y = matmul_nt(x, weight);
    if (bias != nullptr) y = add_row(y, *bias);
    return y;
}

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    return make_op(a.value() + b.value(), {a, b}, [](Node& self) {
        push(self, 0, self.grad);
        push(self, 1, self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    return make_op(a.value() - b.value(), {a, b}, [](Node& self) {
        push(self, 0, self.grad);
        if (self.parents[1]->requires_grad) push(self, 1, -self.grad);
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    return make_op(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
        if (self.parents[0]->requires_grad) push(self, 0, self.grad.cwiseProduct(self.parents[1]->value));
        if (self.parents[1]->requires_grad) push(self, 1, self.grad.cwiseProduct(self.parents[0]->value));
    });
}

Var scale(const Var& a, double c) {
    return make_op(a.value() * c, {a}, [c](Node& self) { push(self, 0, self.grad * c); });
}

Var add_scalar(const Var& a, double c) {
    Mat out = a.value().array() + c;
    return make_op(std::move(out), {a}, [](Node& self) { push(self, 0, self.grad); });
}

Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw ShapeError("add_row: " + shape_str(a.value()) + " + " + shape_str(row.value()));
    }
    Mat out = a.value().rowwise() + row.value().row(0);
    return make_op(std::move(out), {a, row}, [](Node& self) {
        push(self, 0, self.grad);
        if (self.parents[1]->requires_grad) push(self, 1, self.grad.colwise().sum());
    });
}

Var mul_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw ShapeError("mul_row: " + shape_str(a.value()) + " * " + shape_str(row.value()));
    }
    Mat out = a.value().array().rowwise() * row.value().row(0).array();
    return make_op(std::move(out), {a, row}, [](Node& self) {
        const Mat& A = self.parents[0]->value;
        const Mat& R = self.parents[1]->value;
        if (self.parents[0]->requires_grad) {
            Mat g = self.grad.array().rowwise() * R.row(0).array();
            push(self, 0, g);
        }
        if (self.parents[1]->requires_grad) push(self, 1, self.grad.cwiseProduct(A).colwise().sum());
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const auto C = x.cols();
    if (gamma.cols() != C || beta.cols() != C || gamma.rows() != 1 || beta.rows() != 1) {
        throw ShapeError("layer_norm: affine params " + shape_str(gamma.value()) + " for input " +
                         shape_str(x.value()));
    }
    const Mat& X = x.value();
    Mat xhat(X.rows(), C);
    Eigen::VectorXd inv_std(X.rows());
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
        const double mu = X.row(r).mean();
        const double var = (X.row(r).array() - mu).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (X.row(r).array() - mu) * inv_std(r);
    }
    Mat out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    return make_op(std::move(out), {x, gamma, beta},
                   [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       const Mat& G = self.grad;
                       const Mat& gam = self.parents[1]->value;
                       if (self.parents[0]->requires_grad) {
                           Mat dxhat = G.array().rowwise() * gam.row(0).array();
                           Mat dx(G.rows(), G.cols());
                           const double n = static_cast<double>(G.cols());
                           for (Eigen::Index r = 0; r < G.rows(); ++r) {
                               const double m1 = dxhat.row(r).sum() / n;
                               const double m2 = dxhat.row(r).dot(xhat.row(r)) / n;
                               dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                           }
                           push(self, 0, dx);
                       }
                       if (self.parents[1]->requires_grad) push(self, 1, G.cwiseProduct(xhat).colwise().sum());
                       if (self.parents[2]->requires_grad) push(self, 2, G.colwise().sum());
                   });
}

Var softmax_rows(const Var& x, const Mat* mask) {
    Mat z = x.value();
    if (mask != nullptr) {
        if (mask->rows() != z.rows() || mask->cols() != z.cols()) throw ShapeError("softmax_rows: mask shape");
        z += *mask;
    }
    Mat y(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const double m = z.row(r).maxCoeff();
        y.row(r) = (z.row(r).array() - m).exp();
        y.row(r) /= y.row(r).sum();
    }
    Mat y_copy = y;
    return make_op(std::move(y), {x}, [y = std::move(y_copy)](Node& self) {
        Mat gy = self.grad.cwiseProduct(y);
        Eigen::VectorXd s = gy.rowwise().sum();
        Mat dx = gy - (y.array().colwise() * s.array()).matrix();
        push(self, 0, dx);
    });
}

Var quick_gelu(const Var& x) {
    Mat sig = (1.0 + (-1.702 * x.value().array()).exp()).inverse().matrix();
    Mat out = x.value().cwiseProduct(sig);
    return make_op(std::move(out), {x}, [sig = std::move(sig)](Node& self) {
        const Mat& X = self.parents[0]->value;
        Mat d = sig.array() + 1.702 * X.array() * sig.array() * (1.0 - sig.array());
        push(self, 0, self.grad.cwiseProduct(d));
    });
}

Var relu(const Var& x) {
    Mat out = x.value().cwiseMax(0.0);
    return make_op(std::move(out), {x}, [](Node& self) {
        const Mat& X = self.parents[0]->value;
        Mat d = (X.array() > 0.0).cast<double>();
        push(self, 0, self.grad.cwiseProduct(d));
    });
}

Var sqrt(const Var& x) {
    Mat out = x.value().cwiseMax(0.0).cwiseSqrt();
    return make_op(std::move(out), {x}, [](Node& self) {
        // zero subgradient at 0
        Mat d = (self.value.array() > 0.0).select(0.5 / self.value.array(), 0.0);
        push(self, 0, self.grad.cwiseProduct(d));
    });
}

Var transpose(const Var& x) {
    Mat out = x.value().transpose();
    return make_op(std::move(out), {x}, [](Node& self) {
        Mat g = self.grad.transpose();
        push(self, 0, g);
    });
}

Var slice_rows(const Var& x, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > x.rows()) {
        throw ShapeError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                         shape_str(x.value()));
    }
    Mat out = x.value().middleRows(start, count);
    return make_op(std::move(out), {x}, [start, count](Node& self) {
        const Mat& X = self.parents[0]->value;
        Mat g = Mat::Zero(X.rows(), X.cols());
        g.middleRows(start, count) = self.grad;
        push(self, 0, g);
    });
}

Var slice_cols(const Var& x, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > x.cols()) {
        throw ShapeError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " +
                         shape_str(x.value()));
    }
    Mat out = x.value().middleCols(start, count);
    return make_op(std::move(out), {x}, [start, count](Node& self) {
        const Mat& X = self.parents[0]->value;
        Mat g = Mat::Zero(X.rows(), X.cols());
        g.middleCols(start, count) = self.grad;
        push(self, 0, g);
    });
}

Var gather_rows(const Var& x, std::span<const int> indices) {
    Mat out(static_cast<Eigen::Index>(indices.size()), x.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] < 0 || indices[i] >= x.rows()) throw ShapeError("gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(i)) = x.value().row(indices[i]);
    }
    std::vector<int> idx(indices.begin(), indices.end());
    return make_op(std::move(out), {x}, [idx = std::move(idx)](Node& self) {
        const Mat& X = self.parents[0]->value;
        Mat g = Mat::Zero(X.rows(), X.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
        push(self, 0, g);
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    Eigen::Index rows = 0;
    const auto cols = parts[0].cols();
    for (const auto& p : parts) {
        if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
        rows += p.rows();
    }
    Mat out(rows, cols);
    std::vector<Eigen::Index> offsets;
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        offsets.push_back(at);
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    std::vector<Var> parents(parts.begin(), parts.end());
    return make_op(std::move(out), std::move(parents), [offsets = std::move(offsets)](Node& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            if (!self.parents[i]->requires_grad) continue;
            Mat g = self.grad.middleRows(offsets[i], self.parents[i]->value.rows());
            self.parents[i]->accumulate(g);
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    Eigen::Index cols = 0;
    const auto rows = parts[0].rows();
    for (const auto& p : parts) {
        if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
        cols += p.cols();
    }
    Mat out(rows, cols);
    std::vector<Eigen::Index> offsets;
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        offsets.push_back(at);
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    std::vector<Var> parents(parts.begin(), parts.end());
    return make_op(std::move(out), std::move(parents), [offsets = std::move(offsets)](Node& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            if (!self.parents[i]->requires_grad) continue;
            Mat g = self.grad.middleCols(offsets[i], self.parents[i]->value.cols());
            self.parents[i]->accumulate(g);
        }
    });
}

Var element(const Var& x, Eigen::Index r, Eigen::Index c) {
    if (r < 0 || c < 0 || r >= x.rows() || c >= x.cols()) throw ShapeError("element: index out of range");
    Mat out(1, 1);
    out(0, 0) = x.value()(r, c);
    return make_op(std::move(out), {x}, [r, c](Node& self) {
        const Mat& X = self.parents[0]->value;
        Mat g = Mat::Zero(X.rows(), X.cols());
        g(r, c) = self.grad(0, 0);
        push(self, 0, g);
    });
}

Var sum(const Var& x) {
    Mat out(1, 1);
    out(0, 0) = x.value().sum();
    return make_op(std::move(out), {x}, [](Node& self) {
        const Mat& X = self.parents[0]->value;
        push(self, 0, Mat::Constant(X.rows(), X.cols(), self.grad(0, 0)));
    });
}

Var mean(const Var& x) {
    const double n = static_cast<double>(x.value().size());
    if (n == 0) throw ShapeError("mean of empty matrix");
    return scale(sum(x), 1.0 / n);
}

Var l2_normalize_rows(const Var& x, double eps) {
    const Mat& X = x.value();
    Eigen::VectorXd norms = X.rowwise().norm();
    for (Eigen::Index r = 0; r < norms.size(); ++r) {
        if (!(norms(r) > eps) || !std::isfinite(norms(r))) {
            throw NumericError("l2_normalize_rows: row " + std::to_string(r) + " has zero or non-finite norm");
        }
    }
    Mat y = X.array().colwise() / norms.array();
    Mat y_copy = y;
    return make_op(std::move(y), {x}, [y = std::move(y_copy), norms = std::move(norms)](Node& self) {
        const Mat& G = self.grad;
        Eigen::VectorXd gy = G.cwiseProduct(y).rowwise().sum();
        Mat dx = ((G - (y.array().colwise() * gy.array()).matrix()).array().colwise() / norms.array()).matrix();
        push(self, 0, dx);
    });
}

}  // namespace ops
}  // namespace dpclip
