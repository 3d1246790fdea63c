#include "graftor/log.hpp"

#include <iostream>
#include <mutex>

namespace graftor {

namespace {

std::mutex g_mutex;

WarningSink& sink() {
    static WarningSink s = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
    return s;
}

}  // namespace

WarningSink set_warning_sink(WarningSink next) {
    std::lock_guard lock(g_mutex);
    WarningSink prev = std::move(sink());
    sink() = std::move(next);
    return prev;
}

void warn(const std::string& message) {
    std::lock_guard lock(g_mutex);
    if (sink()) sink()(message);
}

}  // namespace graftor
