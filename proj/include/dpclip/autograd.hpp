#pragma once

// Minimal tape-free reverse-mode differentiation over dense row-major
// matrices. Every value is a 2-D matrix; vectors are 1xN rows.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dpclip {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

struct Node {
    Mat value;
    Mat grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void accumulate(const Mat& g);
};

class Var {
public:
    Var() = default;
    explicit Var(Mat value, bool requires_grad = false);

    static Var leaf(Mat value, bool requires_grad) { return Var(std::move(value), requires_grad); }

    const Mat& value() const { return node_->value; }
    Mat& mutable_value() { return node_->value; }
    const Mat& grad() const { return node_->grad; }
    bool has_grad() const { return node_ && node_->grad.size() != 0; }
    void zero_grad() { node_->grad.resize(0, 0); }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    double item() const;

    bool defined() const { return static_cast<bool>(node_); }
    const std::shared_ptr<Node>& node() const { return node_; }

    // Same storage and gradient slot; used for weight sharing.
    bool same_as(const Var& other) const { return node_ == other.node_; }

    // Seeds d(this)/d(this) = 1 (this must be 1x1) and propagates.
    void backward() const;

private:
    friend Var make_op(Mat value, std::vector<Var> parents, std::function<void(Node&)> fn);
    std::shared_ptr<Node> node_;
};

// While alive, new ops record no graph edges on this thread.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

Var constant(Mat value);

namespace ops {

Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
// x W^T + b, with W laid out [out, in] and b a 1x[out] row (optional).
Var linear(const Var& x, const Var& weight, const Var* bias = nullptr);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);

// Broadcast a 1xC row over every row of a (RxC).
Var add_row(const Var& a, const Var& row);
Var mul_row(const Var& a, const Var& row);

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// Row-wise softmax; optional additive mask of the same shape.
Var softmax_rows(const Var& x, const Mat* mask = nullptr);
Var quick_gelu(const Var& x);
Var relu(const Var& x);
// Element-wise square root of max(x, 0).
Var sqrt(const Var& x);

Var transpose(const Var& x);
Var slice_rows(const Var& x, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& x, Eigen::Index start, Eigen::Index count);
Var gather_rows(const Var& x, std::span<const int> indices);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var element(const Var& x, Eigen::Index r, Eigen::Index c);

Var sum(const Var& x);
Var mean(const Var& x);
Var l2_normalize_rows(const Var& x, double eps = 0.0);

}  // namespace ops

inline Var operator+(const Var& a, const Var& b) { return ops::add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return ops::sub(a, b); }
inline Var operator*(double c, const Var& a) { return ops::scale(a, c); }

}  // namespace dpclip
