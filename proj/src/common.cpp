#include "ebr/common.hpp"

#include <cstdio>

namespace ebr {

std::string Fingerprint::hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state_));
    return buf;
}

} // namespace ebr
