#pragma once

#include <algorithm>
#include <array>

#include "dmrl/tensor.hpp"

namespace dmrl {

// Fuses the anatomical representations of any nonempty subset of a subject's
// modalities into a fixed-size map: per pixel and per anatomical channel the
// max, mean, and min across the available modalities, concatenated in that
// order ([max x C, mean x C, min x C]). The output shape is independent of
// how many modalities are present, which is what makes the downstream model
// insensitive to missing inputs.
template <typename S>
Tensor<S> fuse(const std::vector<Tensor<S>>& reps) {
  if (reps.empty()) throw ArgumentError("fuse: need at least one anatomical representation");
  const Tensor<S>& first = reps[0];
  if (first.rank() != 3) throw ShapeError("fuse: reps must be [C,H,W]");
  for (const auto& r : reps) check_same_shape(first, r, "fuse");
  const Index c = first.dim(0), h = first.dim(1), w = first.dim(2);
  const std::size_t k = reps.size();

  Tensor<S> out({3 * c, h, w});
  std::vector<S> vals(k);
  const Index plane = h * w;
  for (Index ci = 0; ci < c; ++ci) {
    for (Index p = 0; p < plane; ++p) {
      for (std::size_t r = 0; r < k; ++r) vals[r] = reps[r].data()[ci * plane + p];
      // Sorting before summation makes the mean exactly permutation
      // invariant; pairwise addition keeps fuse([s,s]) == fuse([s]) exact.
      std::sort(vals.begin(), vals.end());
      S mx = vals[k - 1], mn = vals[0];
      S sum;
      switch (k) {
        case 1: sum = vals[0]; break;
        case 2: sum = vals[0] + vals[1]; break;
        case 3: sum = (vals[0] + vals[1]) + vals[2]; break;
        case 4: sum = (vals[0] + vals[1]) + (vals[2] + vals[3]); break;
        default: {
          sum = S(0);
          for (std::size_t r = 0; r < k; ++r) sum += vals[r];
          break;
        }
      }
      out.data()[ci * plane + p] = mx;
      out.data()[(c + ci) * plane + p] = sum / static_cast<S>(k);
      out.data()[(2 * c + ci) * plane + p] = mn;
    }
  }
  return out;
}

}  // namespace dmrl
