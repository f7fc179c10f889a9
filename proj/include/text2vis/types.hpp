#pragma once

#include <cstdint>

namespace text2vis {

using ImageId = std::uint64_t;

}  // namespace text2vis
