#include "nnm/version.hpp"

#ifndef NNM_VERSION_STRING
#define NNM_VERSION_STRING "0.0.0"
#endif

namespace nnm {

const char* version() { return NNM_VERSION_STRING; }

}  // namespace nnm
