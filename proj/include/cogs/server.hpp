// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cogs/service.hpp"

#include <memory>
#include <stdexcept>
#include <string>

namespace cogs {

/// The bind address could not be opened (port busy, bad address).
struct StartupError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// HTTP/1.1 + WebSocket front end of a RenderService.
///   GET  /api/info    model info JSON
///   POST /api/render  render request JSON -> image/png
///   WS   /api/stream  render request JSON text messages -> binary frames
///                     [u32 LE id length][id bytes][PNG bytes]
/// Errors answer with {"error": ..., "status": ...} (on the stream also "id").
/// Connections are served concurrently; rendering goes through the service's
/// single executor.
class HttpServer {
public:
    /// Binds immediately; port 0 picks a free port. Throws StartupError.
    HttpServer(const RenderService& service, const std::string& address, unsigned short port);
    ~HttpServer();
    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    unsigned short port() const;
    /// Accepts connections until stop() is called (from any thread or a signal handler thread).
    void run();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace cogs
