#include "amg/masks.hpp"

namespace amg {

Tensor build_seq2seq_mask(int src_len, int tgt_len) {
  if (src_len < 1) throw ValidationError("build_seq2seq_mask: src_len must be >= 1");
  if (tgt_len < 0) throw ValidationError("build_seq2seq_mask: tgt_len must be >= 0");
  const int n = src_len + tgt_len;
  Tensor mask = Tensor::zeros({n, n});
  auto& v = mask.value();
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < n; ++k) {
      const bool permitted = i < src_len ? k < src_len : k < src_len || k <= i;
      if (!permitted) v[static_cast<size_t>(i) * n + k] = kMaskForbidden;
    }
  return mask;
}

Tensor build_slot_mask(const Tensor& mask_ta, int src_len, const std::vector<int>& slot_of) {
  const int n = mask_ta.rows();
  if (mask_ta.cols() != n)
    throw ValidationError("build_slot_mask: mask must be square");
  if (static_cast<int>(slot_of.size()) != n)
    throw ValidationError("build_slot_mask: slot_of length " + std::to_string(slot_of.size()) +
                          " does not cover N=" + std::to_string(n));
  Tensor mask = Tensor::from_values(mask_ta.shape(), mask_ta.value());
  auto& v = mask.value();
  for (int i = src_len; i < n; ++i) {
    if (slot_of[i] < 0) continue;
    for (int k = src_len; k < i; ++k)
      if (slot_of[k] == slot_of[i]) v[static_cast<size_t>(i) * n + k] = kMaskForbidden;
  }
  return mask;
}

std::string mask_to_grid(const Tensor& mask) {
  const int n = mask.rows(), m = mask.cols();
  std::string out;
  out.reserve(static_cast<size_t>(n) * (m + 1));
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < m; ++k)
      out += mask.at(i, k) == real(0) ? '.' : 'X';
    out += '\n';
  }
  return out;
}

}  // namespace amg
