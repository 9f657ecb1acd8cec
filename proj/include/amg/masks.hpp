#pragma once

#include "amg/tensor.hpp"

#include <string>
#include <vector>

namespace amg {

// Forbidden attention entries are additive -1e9 rather than literal -inf so
// arithmetic stays finite; softmax still drives their weight to exactly 0.
constexpr real kMaskForbidden = real(-1e9);

// N = src_len + tgt_len. Source positions attend bidirectionally among
// themselves and never to target positions; target position i attends to all
// source positions and to target positions <= i.
Tensor build_seq2seq_mask(int src_len, int tgt_len);

// Copy of mask_ta with additional -1e9 at (i, k) whenever both are target
// positions, slot_of[i] == slot_of[k] != -1 and k < i. `slot_of` covers all N
// positions; entries below src_len are ignored.
Tensor build_slot_mask(const Tensor& mask_ta, int src_len, const std::vector<int>& slot_of);

// Debug grid for golden-file tests: '.' permitted, 'X' forbidden.
std::string mask_to_grid(const Tensor& mask);

}  // namespace amg
