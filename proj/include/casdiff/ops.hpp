#pragma once

#include <vector>

#include "casdiff/autograd.hpp"

namespace casdiff::ops {

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& a, T s);

/// x (N,C,H,W) plus a per-(n,c) offset e (N,C).
template <typename T>
Var<T> add_channel(const Var<T>& x, const Var<T>& e);

template <typename T>
Var<T> silu(const Var<T>& x);

/// 2-D convolution. w is (Cout,Cin,k,k); bias may be null.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int pad);

/// Affine map over the last axis. w is (Dout,Din); bias may be null.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps = T(1e-5));

/// Normalizes over the last axis.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x);

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

/// (N,C,H,W) -> (N,H*W,C)
template <typename T>
Var<T> to_tokens(const Var<T>& x);

/// (N,H*W,C) -> (N,C,H,W)
template <typename T>
Var<T> from_tokens(const Var<T>& x, int height, int width);

/// Multi-head scaled dot-product attention. q is (N,Lq,C); k and v are
/// (N,Lk,C). When valid_keys is non-empty, row n attends only to the key
/// indices listed in valid_keys[n]; other keys never touch the result.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                 const std::vector<std::vector<int>>& valid_keys = {});

/// (N,C,H,W) -> (N,C)
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);

/// mean_n weight[n] * mean_pixels (pred[n] - target[n])^2
template <typename T>
Var<T> weighted_mse(const Var<T>& pred, const Tensor<T>& target, const std::vector<double>& weight);

/// Mean softmax cross-entropy of logits (N,K) against integer labels.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels);

/// Sum of elementwise product with a constant tensor; handy as a probe loss.
template <typename T>
Var<T> dot_constant(const Var<T>& x, const Tensor<T>& c);

/// Row-wise softmax of (N,K) values; not differentiable.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

}  // namespace casdiff::ops
