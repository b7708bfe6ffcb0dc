#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

#include "fbdiff/common.hpp"

namespace fbdiff {

/// Minimal persistent worker pool for data-parallel loops.
///
/// parallel_for partitions [0, n) into contiguous chunks indexed by part
/// number. Each output element is computed by exactly one part with a fixed
/// internal order, so results are bitwise identical for any thread count.
/// Scatter-style accumulation across parts is not allowed here.
///
/// Each call owns a heap-allocated Job; workers snapshot the current job
/// under the lock, so a straggler can never observe a torn or dangling job.
/// Nested parallel_for calls are not supported.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  void set_threads(int n) {
    require(n >= 1, ErrorCode::InvalidArgument, "thread count must be >= 1");
    std::lock_guard<std::mutex> lock(api_mutex_);
    stop_workers();
    target_threads_ = n;
    start_workers();
  }

  int threads() const { return target_threads_; }

  /// Runs fn(i) for i in [0, n). Serial when the pool has one thread or the
  /// range is tiny.
  void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    if (n <= 0) return;
    if (target_threads_ <= 1 || n < 2) {
      for (int64_t i = 0; i < n; ++i) fn(i);
      return;
    }
    std::lock_guard<std::mutex> lock(api_mutex_);
    auto job = std::make_shared<Job>();
    job->fn = &fn;
    job->n = n;
    job->parts = static_cast<int>(std::min<int64_t>(target_threads_ * 4, n));
    job->pending.store(job->parts, std::memory_order_release);
    {
      std::lock_guard<std::mutex> jl(job_mutex_);
      current_ = job;
      ++job_id_;
    }
    job_cv_.notify_all();
    drain(*job);
    {
      std::unique_lock<std::mutex> dl(job->done_mutex);
      job->done_cv.wait(dl, [&] { return job->pending.load(std::memory_order_acquire) == 0; });
    }
    std::lock_guard<std::mutex> jl(job_mutex_);
    current_.reset();
  }

  ~ThreadPool() { stop_workers(); }

 private:
  struct Job {
    const std::function<void(int64_t)>* fn = nullptr;
    int64_t n = 0;
    int parts = 0;
    std::atomic<int> next{0};
    std::atomic<int> pending{0};
    std::mutex done_mutex;
    std::condition_variable done_cv;
  };

  ThreadPool() : target_threads_(1) {}

  // Claims and runs chunks of one job. The job object is kept alive by the
  // caller (shared_ptr); fn stays valid because parallel_for cannot return
  // before pending reaches zero, and pending only reaches zero after every
  // part has finished running.
  static void drain(Job& job) {
    const int64_t chunk = (job.n + job.parts - 1) / job.parts;
    int part;
    while ((part = job.next.fetch_add(1, std::memory_order_acq_rel)) < job.parts) {
      const int64_t lo = part * chunk;
      const int64_t hi = std::min<int64_t>(job.n, lo + chunk);
      for (int64_t i = lo; i < hi; ++i) (*job.fn)(i);
      if (job.pending.fetch_sub(1, std::memory_order_acq_rel) == 1) {
        std::lock_guard<std::mutex> dl(job.done_mutex);
        job.done_cv.notify_all();
      }
    }
  }

  void worker_loop() {
    uint64_t seen_job = 0;
    while (true) {
      std::shared_ptr<Job> job;
      {
        std::unique_lock<std::mutex> jl(job_mutex_);
        job_cv_.wait(jl, [&] { return stop_ || (job_id_ != seen_job && current_); });
        if (stop_) return;
        seen_job = job_id_;
        job = current_;
      }
      if (job) drain(*job);
    }
  }

  void start_workers() {
    stop_ = false;
    for (int i = 1; i < target_threads_; ++i) workers_.emplace_back([this] { worker_loop(); });
  }

  void stop_workers() {
    {
      std::lock_guard<std::mutex> jl(job_mutex_);
      stop_ = true;
    }
    job_cv_.notify_all();
    for (auto& w : workers_) w.join();
    workers_.clear();
    stop_ = false;
  }

  std::mutex api_mutex_;
  std::mutex job_mutex_;
  std::condition_variable job_cv_;
  std::vector<std::thread> workers_;
  std::shared_ptr<Job> current_;
  uint64_t job_id_ = 0;
  bool stop_ = false;
  int target_threads_;
};

inline void set_num_threads(int n) { ThreadPool::instance().set_threads(n); }
inline int num_threads() { return ThreadPool::instance().threads(); }

inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  ThreadPool::instance().parallel_for(n, fn);
}

}  // namespace fbdiff
