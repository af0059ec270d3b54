// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace nmtforge {

inline constexpr const char* kVersion = "0.1.0";
// Pipeline stage directories; bump when a stage's outputs change meaning.
inline constexpr int kStageFormatVersion = 1;

}  // namespace nmtforge
