#include "text2ct/common.hpp"

#include <cstdarg>
#include <vector>

namespace text2ct {

std::string strformat(const char* fmt, ...) {
    va_list args;
    va_start(args, fmt);
    va_list args2;
    va_copy(args2, args);
    int n = vsnprintf(nullptr, 0, fmt, args);
    va_end(args);
    std::string out;
    if (n > 0) {
        out.resize(static_cast<size_t>(n));
        vsnprintf(out.data(), static_cast<size_t>(n) + 1, fmt, args2);
    }
    va_end(args2);
    return out;
}

static void vlog(const char* tag, const char* fmt, va_list args) {
    fprintf(stderr, "[%s] ", tag);
    vfprintf(stderr, fmt, args);
    fputc('\n', stderr);
}

void log_info(const char* fmt, ...) {
    va_list a;
    va_start(a, fmt);
    vlog("info", fmt, a);
    va_end(a);
}
void log_warn(const char* fmt, ...) {
    va_list a;
    va_start(a, fmt);
    vlog("warn", fmt, a);
    va_end(a);
}
void log_error(const char* fmt, ...) {
    va_list a;
    va_start(a, fmt);
    vlog("error", fmt, a);
    va_end(a);
}

std::string hex64(uint64_t v) {
    char buf[17];
    snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

}  // namespace text2ct
