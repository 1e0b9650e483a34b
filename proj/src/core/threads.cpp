#include "core/threads.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace ps {

namespace {

std::atomic<int> g_threads{0};
thread_local bool t_inside_worker = false;

int effective_threads() {
  int n = g_threads.load(std::memory_order_relaxed);
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  return std::max(1, n);
}

// Persistent worker pool. Jobs are index ranges claimed in chunks through an
// atomic cursor; which worker runs which chunk never affects results because
// callers only write to per-index state.
class WorkerPool {
public:
  static WorkerPool& instance() {
    static WorkerPool pool;
    return pool;
  }

  void run(size_t n, const std::function<void(size_t)>& fn) {
    const size_t workers = std::min<size_t>(effective_threads(), n);
    if (workers <= 1 || t_inside_worker) {
      for (size_t i = 0; i < n; ++i) fn(i);
      return;
    }
    ensure_spawned(workers - 1);

    // Shared ownership: helpers may still touch the job's atomics after the
    // last index completes, so the job must outlive this frame.
    auto job = std::make_shared<Job>();
    job->fn = &fn;
    job->n = n;
    job->chunk = std::max<size_t>(1, n / (workers * 8));
    job->helper_slots.store(int(workers) - 1, std::memory_order_relaxed);

    {
      std::lock_guard<std::mutex> lock(mutex_);
      job_ = job;
      ++job_id_;
    }
    cv_.notify_all();

    work_on(*job);  // the caller is one of the workers

    // Once every index has run, fn (and the caller's captures) are no longer
    // invoked; helpers at most bump the job's own counters.
    while (job->completed.load(std::memory_order_acquire) < n)
      std::this_thread::yield();

    {
      std::lock_guard<std::mutex> lock(mutex_);
      job_.reset();
    }
  }

  ~WorkerPool() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

private:
  struct Job {
    const std::function<void(size_t)>* fn = nullptr;
    size_t n = 0;
    size_t chunk = 1;
    std::atomic<size_t> cursor{0};
    std::atomic<size_t> completed{0};
    std::atomic<int> helper_slots{0};
  };

  static void work_on(Job& job) {
    for (;;) {
      const size_t begin =
          job.cursor.fetch_add(job.chunk, std::memory_order_relaxed);
      if (begin >= job.n) return;
      const size_t end = std::min(job.n, begin + job.chunk);
      for (size_t i = begin; i < end; ++i) (*job.fn)(i);
      job.completed.fetch_add(end - begin, std::memory_order_release);
    }
  }

  void ensure_spawned(size_t helpers) {
    std::lock_guard<std::mutex> lock(mutex_);
    const size_t limit = std::max<size_t>(
        1, std::thread::hardware_concurrency()) - 1;
    const size_t want = std::min(helpers, limit);
    while (threads_.size() < want)
      threads_.emplace_back([this] { worker_loop(); });
  }

  void worker_loop() {
    t_inside_worker = true;
    uint64_t seen = 0;
    for (;;) {
      std::shared_ptr<Job> job;
      {
        std::unique_lock<std::mutex> lock(mutex_);
        cv_.wait(lock, [&] { return stop_ || (job_ && job_id_ != seen); });
        if (stop_) return;
        job = job_;
        seen = job_id_;
      }
      if (job->helper_slots.fetch_sub(1, std::memory_order_relaxed) <= 0)
        continue;
      work_on(*job);
    }
  }

  std::mutex mutex_;
  std::condition_variable cv_;
  std::vector<std::thread> threads_;
  std::shared_ptr<Job> job_;
  uint64_t job_id_ = 0;
  bool stop_ = false;
};

}  // namespace

void set_thread_count(int n) { g_threads.store(n, std::memory_order_relaxed); }

int thread_count() { return effective_threads(); }

void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
  if (n == 0) return;
  WorkerPool::instance().run(n, fn);
}

}  // namespace ps
