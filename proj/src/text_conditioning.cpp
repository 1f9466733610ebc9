#include "casdiff/text_conditioning.hpp"

#include <cmath>
#include <string>

#include "casdiff/errors.hpp"

namespace casdiff {

TextConditioning TextConditioning::null(int max_tokens, int embed_dim) {
  TextConditioning c;
  c.max_tokens = max_tokens;
  c.embed_dim = embed_dim;
  c.tokens.assign(static_cast<std::size_t>(max_tokens) * static_cast<std::size_t>(embed_dim), 0.0f);
  c.mask.assign(static_cast<std::size_t>(max_tokens), 0);
  c.mask[0] = 1;
  c.pooled.assign(static_cast<std::size_t>(embed_dim), 0.0f);
  return c;
}

TextConditioning TextConditioning::from_rows(int max_tokens, int embed_dim, const std::vector<float>& rows,
                                             int count) {
  if (max_tokens < 1 || embed_dim < 1) throw InvalidArgument("conditioning: dimensions must be positive");
  if (count < 1 || count > max_tokens) throw InvalidArgument("conditioning: token count out of range");
  if (rows.size() < static_cast<std::size_t>(count) * static_cast<std::size_t>(embed_dim))
    throw InvalidArgument("conditioning: not enough row data");
  TextConditioning c;
  c.max_tokens = max_tokens;
  c.embed_dim = embed_dim;
  c.tokens.assign(static_cast<std::size_t>(max_tokens) * static_cast<std::size_t>(embed_dim), 0.0f);
  std::copy_n(rows.begin(), static_cast<long>(count) * embed_dim, c.tokens.begin());
  c.mask.assign(static_cast<std::size_t>(max_tokens), 0);
  std::fill_n(c.mask.begin(), count, 1);
  c.pooled = c.recompute_pooled();
  return c;
}

int TextConditioning::token_count() const {
  int n = 0;
  for (auto m : mask) n += m ? 1 : 0;
  return n;
}

bool TextConditioning::is_null() const {
  if (token_count() != 1 || !mask[0]) return false;
  for (float v : tokens)
    if (v != 0.0f) return false;
  for (float v : pooled)
    if (v != 0.0f) return false;
  return true;
}

std::vector<float> TextConditioning::recompute_pooled() const {
  std::vector<double> acc(static_cast<std::size_t>(embed_dim), 0.0);
  int n = 0;
  for (int i = 0; i < max_tokens; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    ++n;
    for (int e = 0; e < embed_dim; ++e) acc[static_cast<std::size_t>(e)] += row(i)[e];
  }
  std::vector<float> out(static_cast<std::size_t>(embed_dim), 0.0f);
  if (n == 0) return out;
  for (int e = 0; e < embed_dim; ++e) out[static_cast<std::size_t>(e)] = static_cast<float>(acc[static_cast<std::size_t>(e)] / n);
  return out;
}

void TextConditioning::validate() const {
  const auto cells = static_cast<std::size_t>(max_tokens) * static_cast<std::size_t>(embed_dim);
  if (max_tokens < 1 || embed_dim < 1 || tokens.size() != cells || mask.size() != static_cast<std::size_t>(max_tokens) ||
      pooled.size() != static_cast<std::size_t>(embed_dim))
    throw InvalidArgument("conditioning: inconsistent sizes");
  if (token_count() < 1) throw InvalidArgument("conditioning: no valid tokens");
  for (int i = 0; i < max_tokens; ++i) {
    for (int e = 0; e < embed_dim; ++e) {
      const float v = row(i)[e];
      if (!std::isfinite(v)) throw InvalidArgument("conditioning: non-finite embedding");
      if (!mask[static_cast<std::size_t>(i)] && v != 0.0f)
        throw InvalidArgument("conditioning: masked row " + std::to_string(i) + " is not zero");
    }
  }
  const auto expect = recompute_pooled();
  for (std::size_t e = 0; e < expect.size(); ++e) {
    if (std::abs(expect[e] - pooled[e]) > 1e-6f) throw InvalidArgument("conditioning: pooled vector out of sync");
  }
}

}  // namespace casdiff
