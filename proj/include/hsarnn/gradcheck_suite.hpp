#pragma once

#include "hsarnn/kernel/gradcheck.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace hsarnn::gradcheck {

using kernel::Index;

struct SuiteOptions {
  double tolerance = 1e-4;
  double eps = 1e-5;
  Index seeds = 5;                  // random seeds per opcode and shape
  Index block_coords = 48;          // sampled coordinates per tensor for blocks
  Index sequence_coords = 16;       // same, for the full sequence losses
  Index sequence_steps = 5;
  double sequence_eps = 1e-4;       // loss ~ 7.6: smaller steps drown in cancellation
  std::uint64_t seed = 0;
};

struct SuiteEntry {
  std::string name;  // opcode name, or "block:<name>"
  double max_error = 0.0;
  Index cases = 0;
  Index checked = 0;  // coordinates compared
  Index skipped = 0;  // coordinates whose difference straddled a kink
  std::string metric = "elementwise";
  bool passed = false;
};

struct SuiteResult {
  std::vector<SuiteEntry> entries;
  double seconds = 0.0;
  bool passed = false;
};

/// Central-difference check of every differentiable opcode over several
/// seeds and two shapes each, then of the composite blocks (encoder,
/// spatial softmax, LSTM step, decoder, st_loss) and the full teacher-forced
/// sequence loss of a hierarchical ST model and a flat regression model.
/// The sequence losses are scored per tensor in norm, since individual
/// entries fall to ~1e-9 where difference quotients carry ~1e-11 noise.
SuiteResult run_suite(const SuiteOptions& options = {});

}  // namespace hsarnn::gradcheck
