#pragma once

namespace cuma {

// Serial reference path or OpenMP data-parallel path.
enum class Exec { serial, parallel };

}  // namespace cuma
