#ifndef PLNPCA_PARALLEL_HPP
#define PLNPCA_PARALLEL_HPP

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace plnpca {

/**
 * Run `fun(begin, end)` over `[0, total)` split into contiguous chunks, one per worker.
 * Chunks are disjoint, so callers may write to row-partitioned buffers without locking.
 * The first exception thrown by any worker is rethrown on the calling thread.
 */
template<class Function_>
void parallelize(std::size_t total, int num_threads, Function_ fun) {
    if (total == 0) {
        return;
    }
    std::size_t workers = static_cast<std::size_t>(std::max(1, num_threads));
    workers = std::min(workers, total);
    if (workers == 1) {
        fun(std::size_t(0), total);
        return;
    }

    std::size_t per = (total + workers - 1) / workers;
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        std::size_t start = w * per;
        std::size_t stop = std::min(total, start + per);
        if (start >= stop) {
            break;
        }
        pool.emplace_back([&, w, start, stop]() {
            try {
                fun(start, stop);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

/**
 * Pairwise summation in a fixed order.
 * The result depends only on the input sequence, never on how it was produced.
 */
template<class Iterator_>
double pairwise_sum(Iterator_ first, std::size_t count) {
    if (count <= 8) {
        double total = 0;
        for (std::size_t i = 0; i < count; ++i, ++first) {
            total += *first;
        }
        return total;
    }
    std::size_t half = count / 2;
    return pairwise_sum(first, half) + pairwise_sum(first + half, count - half);
}

} // namespace plnpca

#endif
