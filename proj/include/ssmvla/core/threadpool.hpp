// Copyright 2026 The ssmvla Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <queue>
#include <thread>
#include <vector>

namespace ssmvla {

/// Fixed-size worker pool. Work items are (slot, fn) pairs where the slot is
/// chosen by the caller; results must be written into slot-indexed buffers so
/// that reduction order is fixed regardless of scheduling. With one thread
/// everything runs inline on the calling thread.
class ThreadPool {
public:
    explicit ThreadPool(int threads) : threads_(threads < 1 ? 1 : threads) {
        if (threads_ == 1) return;
        workers_.reserve(static_cast<std::size_t>(threads_));
        for (int i = 0; i < threads_; ++i) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    ~ThreadPool() {
        if (threads_ == 1) return;
        {
            std::lock_guard<std::mutex> lock(mu_);
            stopping_ = true;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
    }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

    int size() const { return threads_; }

    /// Runs fn(i) for i in [0, n), blocking until all complete.
    void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
        if (n <= 0) return;
        if (threads_ == 1) {
            for (std::int64_t i = 0; i < n; ++i) fn(i);
            return;
        }
        std::mutex done_mu;
        std::condition_variable done_cv;
        std::int64_t remaining = n;
        {
            std::lock_guard<std::mutex> lock(mu_);
            for (std::int64_t i = 0; i < n; ++i) {
                queue_.push([&fn, i, &done_mu, &done_cv, &remaining] {
                    fn(i);
                    std::lock_guard<std::mutex> dl(done_mu);
                    if (--remaining == 0) done_cv.notify_one();
                });
            }
        }
        cv_.notify_all();
        std::unique_lock<std::mutex> dl(done_mu);
        done_cv.wait(dl, [&remaining] { return remaining == 0; });
    }

private:
    void worker_loop() {
        for (;;) {
            std::function<void()> task;
            {
                std::unique_lock<std::mutex> lock(mu_);
                cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
                if (stopping_ && queue_.empty()) return;
                task = std::move(queue_.front());
                queue_.pop();
            }
            task();
        }
    }

    int threads_;
    std::vector<std::thread> workers_;
    std::queue<std::function<void()>> queue_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool stopping_ = false;
};

}  // namespace ssmvla
