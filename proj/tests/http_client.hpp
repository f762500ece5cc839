// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

// Minimal blocking HTTP and WebSocket clients for exercising the render service.

#pragma once

#include "cogs/server.hpp"

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <cstdint>
#include <string>
#include <thread>
#include <utility>

namespace cogs::test {

struct HttpResult {
    int status = 0;
    std::string content_type;
    std::string body;
};

inline HttpResult http_call(unsigned short port, boost::beast::http::verb verb, const std::string& target,
                            const std::string& body = {}) {
    namespace beast = boost::beast;
    namespace http = beast::http;
    boost::asio::io_context ioc;
    boost::asio::ip::tcp::socket socket(ioc);
    socket.connect({boost::asio::ip::make_address("127.0.0.1"), port});
    http::request<http::string_body> req{verb, target, 11};
    req.set(http::field::host, "127.0.0.1");
    req.set(http::field::content_type, "application/json");
    req.body() = body;
    req.prepare_payload();
    http::write(socket, req);
    beast::flat_buffer buffer;
    http::response<http::string_body> res;
    http::read(socket, buffer, res);
    beast::error_code ec;
    socket.shutdown(boost::asio::ip::tcp::socket::shutdown_both, ec);
    return {static_cast<int>(res.result_int()), std::string(res[http::field::content_type]), res.body()};
}

class WsClient {
public:
    explicit WsClient(unsigned short port) : socket_(ioc_), ws_(socket_) {
        socket_.connect({boost::asio::ip::make_address("127.0.0.1"), port});
        ws_.handshake("127.0.0.1", "/api/stream");
    }
    ~WsClient() {
        boost::beast::error_code ec;
        ws_.close(boost::beast::websocket::close_code::normal, ec);
    }

    void send(const std::string& text) {
        ws_.text(true);
        ws_.write(boost::asio::buffer(text));
    }

    /// Returns (binary?, payload).
    std::pair<bool, std::string> receive() {
        boost::beast::flat_buffer buffer;
        ws_.read(buffer);
        return {ws_.got_binary(), boost::beast::buffers_to_string(buffer.data())};
    }

private:
    boost::asio::io_context ioc_;
    boost::asio::ip::tcp::socket socket_;
    boost::beast::websocket::stream<boost::asio::ip::tcp::socket&> ws_;
};

/// Splits a stream frame into (id, png bytes).
inline std::pair<std::string, std::string> split_frame(const std::string& frame) {
    if (frame.size() < 4) return {};
    std::uint32_t n = 0;
    for (int k = 0; k < 4; ++k) n |= static_cast<std::uint32_t>(static_cast<unsigned char>(frame[k])) << (8 * k);
    if (frame.size() < 4 + n) return {};
    return {frame.substr(4, n), frame.substr(4 + n)};
}

/// Runs an HttpServer on a background thread for the lifetime of the object.
class ServerThread {
public:
    explicit ServerThread(const RenderService& service) : server_(service, "127.0.0.1", 0) {
        thread_ = std::thread([this] { server_.run(); });
    }
    ~ServerThread() {
        server_.stop();
        thread_.join();
    }
    unsigned short port() const { return server_.port(); }

private:
    HttpServer server_;
    std::thread thread_;
};

}  // namespace cogs::test
