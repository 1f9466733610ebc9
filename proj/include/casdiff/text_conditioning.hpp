#pragma once

#include <cstdint>
#include <vector>

namespace casdiff {

/// Encoded caption: token embedding rows, validity mask, and pooled vector.
///
/// Rows with mask 0 are exactly zero and `pooled` is the mean of the valid
/// rows. The null conditioning used for classifier-free guidance has one
/// valid all-zero row, so every attention query has a key to attend to.
struct TextConditioning {
  int max_tokens = 0;
  int embed_dim = 0;
  std::vector<float> tokens;        // max_tokens x embed_dim, row-major
  std::vector<std::uint8_t> mask;   // max_tokens
  std::vector<float> pooled;        // embed_dim

  static TextConditioning null(int max_tokens, int embed_dim);

  /// Builds a conditioning from `count` valid rows; pooled is recomputed.
  static TextConditioning from_rows(int max_tokens, int embed_dim, const std::vector<float>& rows, int count);

  int token_count() const;
  bool is_null() const;
  const float* row(int i) const { return tokens.data() + static_cast<long>(i) * embed_dim; }

  /// Mask-weighted mean of the valid rows.
  std::vector<float> recompute_pooled() const;

  /// Throws InvalidArgument when any structural invariant fails.
  void validate() const;

  bool operator==(const TextConditioning&) const = default;
};

}  // namespace casdiff
