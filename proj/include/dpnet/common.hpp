#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dpnet {

// Thrown for contract violations (bad shapes, bad arguments, malformed files).
class value_error : public std::runtime_error {
public:
    explicit value_error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
inline void format_parts(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_parts(std::ostringstream& oss, T&& v, Rest&&... rest) {
    oss << std::forward<T>(v);
    format_parts(oss, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Parts>
std::string format_msg(Parts&&... parts) {
    std::ostringstream oss;
    detail::format_parts(oss, std::forward<Parts>(parts)...);
    return oss.str();
}

template <typename... Parts>
[[noreturn]] void fail(Parts&&... parts) {
    throw value_error(format_msg(std::forward<Parts>(parts)...));
}

#define DPNET_CHECK(cond, ...)                    \
    do {                                          \
        if (!(cond)) ::dpnet::fail(__VA_ARGS__);  \
    } while (0)

// FNV-1a, used for config hashes and manifest name-order hashes.
inline uint64_t fnv1a_bytes(const void* data, size_t len,
                            uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t seed = 0xcbf29ce484222325ull) {
    return fnv1a_bytes(s.data(), s.size(), seed);
}

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

// Worker pool shared by the tensor ops. Work is split into fixed ranges so
// results do not depend on the number of threads. DPNET_THREADS caps the pool.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    int size() const { return static_cast<int>(workers_.size()) + 1; }

    // Runs fn(begin, end) over [0, n) split into one contiguous range per
    // worker. fn must not touch the same output element from two ranges.
    void parallel_ranges(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
        if (n <= 0) return;
        const int nt = static_cast<int>(std::min<int64_t>(size(), n));
        if (nt <= 1) {
            fn(0, n);
            return;
        }
        std::unique_lock<std::mutex> guard(submit_mutex_);
        const int64_t chunk = (n + nt - 1) / nt;
        pending_.store(nt - 1, std::memory_order_release);
        {
            std::lock_guard<std::mutex> lk(queue_mutex_);
            for (int t = 1; t < nt; ++t) {
                const int64_t b = t * chunk;
                const int64_t e = std::min<int64_t>(n, b + chunk);
                queue_.emplace_back([&fn, b, e] { fn(b, e); });
            }
        }
        queue_cv_.notify_all();
        fn(0, std::min<int64_t>(n, chunk));
        std::unique_lock<std::mutex> lk(done_mutex_);
        done_cv_.wait(lk, [this] { return pending_.load(std::memory_order_acquire) == 0; });
    }

private:
    ThreadPool() {
        int n = static_cast<int>(std::thread::hardware_concurrency());
        if (const char* env = std::getenv("DPNET_THREADS")) {
            const int cap = std::atoi(env);
            if (cap > 0) n = std::min(n, cap);
        }
        if (n < 1) n = 1;
        for (int t = 0; t < n - 1; ++t) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lk(queue_mutex_);
            stop_ = true;
        }
        queue_cv_.notify_all();
        for (auto& w : workers_) w.join();
    }

    void worker_loop() {
        for (;;) {
            std::function<void()> task;
            {
                std::unique_lock<std::mutex> lk(queue_mutex_);
                queue_cv_.wait(lk, [this] { return stop_ || !queue_.empty(); });
                if (stop_ && queue_.empty()) return;
                task = std::move(queue_.front());
                queue_.erase(queue_.begin());
            }
            task();
            if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
                std::lock_guard<std::mutex> lk(done_mutex_);
                done_cv_.notify_all();
            }
        }
    }

    std::vector<std::thread> workers_;
    std::vector<std::function<void()>> queue_;
    std::mutex queue_mutex_;
    std::condition_variable queue_cv_;
    std::mutex submit_mutex_;
    std::mutex done_mutex_;
    std::condition_variable done_cv_;
    std::atomic<int> pending_{0};
    bool stop_ = false;
};

inline void parallel_ranges(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    ThreadPool::instance().parallel_ranges(n, fn);
}

// Per-item convenience wrapper; each index is still processed exactly once.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    parallel_ranges(n, [&fn](int64_t b, int64_t e) {
        for (int64_t i = b; i < e; ++i) fn(i);
    });
}

}  // namespace dpnet
