#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <string>
#include <thread>
#include <vector>

namespace contrastsurv {

inline int default_worker_count() {
  if (const char* env = std::getenv("CONTRASTSURV_WORKERS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(std::min(hw, 8u));
}

struct JobOutcome {
  bool ok = true;
  std::string error;
};

// Runs jobs 0..n-1 on a fixed pool of workers. Each job writes only its own
// slot, so results are position-stable and independent of scheduling.
// Exceptions are captured per job.
inline std::vector<JobOutcome> run_jobs(int n_jobs, int workers,
                                        const std::function<void(int)>& job) {
  std::vector<JobOutcome> outcomes(static_cast<std::size_t>(n_jobs));
  if (n_jobs == 0) return outcomes;
  workers = std::max(1, std::min(workers, n_jobs));

  std::atomic<int> next{0};
  const auto worker = [&]() {
    while (true) {
      const int i = next.fetch_add(1);
      if (i >= n_jobs) return;
      try {
        job(i);
      } catch (const std::exception& e) {
        outcomes[static_cast<std::size_t>(i)] = {false, e.what()};
      } catch (...) {
        outcomes[static_cast<std::size_t>(i)] = {false, "unknown error"};
      }
    }
  };

  if (workers == 1) {
    worker();
    return outcomes;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return outcomes;
}

}  // namespace contrastsurv
