#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mixedray {

inline std::atomic<int>& thread_cap() {
    static std::atomic<int> cap{1};
    return cap;
}

inline void set_num_threads(int n) { thread_cap() = std::max(1, n); }

// Static block partition; results must be written to per-index slots so output is schedule independent.
template <class Fn>
void parallel_for(std::size_t count, Fn&& fn) {
    const std::size_t nt = std::min<std::size_t>(static_cast<std::size_t>(thread_cap().load()), count);
    if (nt <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::exception_ptr err;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nt; ++t) {
        pool.emplace_back([&, t] {
            const std::size_t a = count * t / nt, b = count * (t + 1) / nt;
            try {
                for (std::size_t i = a; i < b; ++i) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(mu);
                if (!err) err = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace mixedray
