#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace stitch {

// Work pool for op-level parallelism. Tasks must write disjoint outputs;
// the task decomposition is fixed independently of the thread count, so
// results are bit-identical whether run on 1 thread or many.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    // 0 = hardware concurrency. May be called before first use; once workers
    // exist the count is fixed for the process.
    static void set_threads(int n) { instance().requested_ = n; }

    // Marks the calling thread so ops it runs execute inline. Threads spawned
    // outside the pool (e.g. per-sample eval workers) must set this before
    // calling into ops; run() is not reentrant from unmarked threads.
    static void set_inline_ops(bool v) { in_worker_ = v; }

    int threads() {
        ensure_started();
        return (int)workers_.size() + 1;
    }

    // Runs tasks [0, n) via fn. Calls from inside a worker run inline
    // (no nested parallelism).
    void run(int n, const std::function<void(int)>& fn) {
        if (n <= 0) return;
        ensure_started();
        if (n == 1 || workers_.empty() || in_worker_) {
            for (int i = 0; i < n; ++i) fn(i);
            return;
        }
        std::unique_lock<std::mutex> lk(mu_);
        job_ = &fn;
        job_count_ = n;
        next_ = 0;
        pending_ = n;
        ++generation_;
        lk.unlock();
        cv_.notify_all();
        // caller participates
        work_loop();
        lk.lock();
        done_cv_.wait(lk, [&] { return pending_ == 0; });
        job_ = nullptr;
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

private:
    ThreadPool() = default;

    void ensure_started() {
        std::call_once(start_once_, [&] {
            int n = requested_ > 0 ? requested_ : (int)std::thread::hardware_concurrency();
            if (n < 1) n = 1;
            for (int i = 0; i < n - 1; ++i)
                workers_.emplace_back([this] { worker_main(); });
        });
    }

    void worker_main() {
        in_worker_ = true;
        uint64_t seen = 0;
        while (true) {
            std::unique_lock<std::mutex> lk(mu_);
            cv_.wait(lk, [&] { return stop_ || (job_ && generation_ != seen && next_ < job_count_); });
            if (stop_) return;
            seen = generation_;
            lk.unlock();
            work_loop();
        }
    }

    void work_loop() {
        bool was_worker = in_worker_;
        in_worker_ = true;
        while (true) {
            int i = next_.fetch_add(1);
            if (i >= job_count_) break;
            (*job_)(i);
            if (pending_.fetch_sub(1) == 1) {
                std::lock_guard<std::mutex> lk(mu_);
                done_cv_.notify_all();
            }
        }
        in_worker_ = was_worker;
    }

    std::once_flag start_once_;
    int requested_ = 0;
    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(int)>* job_ = nullptr;
    int job_count_ = 0;
    std::atomic<int> next_{0};
    std::atomic<int> pending_{0};
    uint64_t generation_ = 0;
    bool stop_ = false;
    static thread_local bool in_worker_;
};

inline thread_local bool ThreadPool::in_worker_ = false;

inline void parallel_for(int n, const std::function<void(int)>& fn) {
    ThreadPool::instance().run(n, fn);
}

}  // namespace stitch
