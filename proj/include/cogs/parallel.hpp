// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace cogs {

/// Number of workers used by parallel_for. Reads COGS_THREADS once, falls back
/// to std::thread::hardware_concurrency().
int default_worker_count();

/// Runs body(i) for i in [0, count). Chunks are claimed dynamically, so callers
/// that reduce results must index their partial buffers by i, never by worker.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body,
                  int workers = 0);

}  // namespace cogs
