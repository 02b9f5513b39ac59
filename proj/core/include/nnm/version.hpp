#pragma once

namespace nnm {

/// Library version string ("<semver>" or "<semver>+<git>").
const char* version();

}  // namespace nnm
