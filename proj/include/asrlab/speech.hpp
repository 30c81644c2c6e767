#pragma once

#include "asrlab/matrix.hpp"

namespace asrlab {

// Adapter output H_s: one d_model row per downsampled frame.
struct SpeechRep {
  Mat vectors;  // T_s x d_model

  int length() const { return vectors.rows; }
  int dim() const { return vectors.cols; }
};

}  // namespace asrlab
