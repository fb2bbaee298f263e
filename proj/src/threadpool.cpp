#include "rvernet/threadpool.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace rvernet {

namespace {

int read_env_threads() {
    const char* v = std::getenv("RVERNET_THREADS");
    if (!v) return 1;
    int n = std::atoi(v);
    return n < 1 ? 1 : n;
}

int g_threads = read_env_threads();

// Lazily started pool. Workers sleep until a parallel_for hands them a range.
class Pool {
public:
    static Pool& instance() {
        static Pool p;
        return p;
    }

    void run(int64_t n, int threads, const std::function<void(int64_t, int64_t)>& fn) {
        threads = std::min<int64_t>(threads, n);
        ensure_workers(threads - 1);
        {
            std::unique_lock<std::mutex> lk(mu_);
            fn_ = &fn;
            total_ = n;
            parts_ = threads;
            pending_ = threads - 1;  // part 0 runs on the caller
            ++epoch_;
        }
        cv_.notify_all();
        run_part(0);
        std::unique_lock<std::mutex> lk(mu_);
        done_cv_.wait(lk, [&] { return pending_ == 0; });
        fn_ = nullptr;
    }

private:
    Pool() = default;

    ~Pool() {
        {
            std::unique_lock<std::mutex> lk(mu_);
            stop_ = true;
            ++epoch_;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
    }

    void ensure_workers(int want) {
        std::unique_lock<std::mutex> lk(mu_);
        while ((int)workers_.size() < want) {
            int id = (int)workers_.size() + 1;
            workers_.emplace_back([this, id] { worker_loop(id); });
        }
    }

    void run_part(int part) {
        int64_t chunk = (total_ + parts_ - 1) / parts_;
        int64_t b = std::min<int64_t>(total_, part * chunk);
        int64_t e = std::min<int64_t>(total_, b + chunk);
        if (b < e) (*fn_)(b, e);
    }

    void worker_loop(int id) {
        uint64_t seen = 0;
        for (;;) {
            int part;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return stop_ || (epoch_ != seen && id < parts_); });
                if (stop_) return;
                seen = epoch_;
                part = id;
            }
            run_part(part);
            {
                std::unique_lock<std::mutex> lk(mu_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::mutex mu_;
    std::condition_variable cv_, done_cv_;
    std::vector<std::thread> workers_;
    const std::function<void(int64_t, int64_t)>* fn_ = nullptr;
    int64_t total_ = 0;
    int parts_ = 0;
    int pending_ = 0;
    uint64_t epoch_ = 0;
    bool stop_ = false;
};

}  // namespace

int num_threads() { return g_threads; }

void set_num_threads(int n) { g_threads = n < 1 ? 1 : n; }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    if (g_threads <= 1 || n == 1) {
        fn(0, n);
        return;
    }
    Pool::instance().run(n, g_threads, fn);
}

}  // namespace rvernet
