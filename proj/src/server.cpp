// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/server.hpp"

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <spdlog/spdlog.h>

#include <list>
#include <thread>

namespace cogs {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using nlohmann::json;

namespace {

using Request = http::request<http::string_body>;
using Response = http::response<http::string_body>;

Response make_response(const Request& req, http::status status, std::string body, const char* type) {
    Response res{status, req.version()};
    res.set(http::field::server, "cogs");
    res.set(http::field::content_type, type);
    res.set(http::field::access_control_allow_origin, "*");
    res.keep_alive(req.keep_alive());
    res.body() = std::move(body);
    res.prepare_payload();
    return res;
}

Response error_response(const Request& req, int status, const std::string& message) {
    const json body = {{"error", message}, {"status", status}};
    return make_response(req, static_cast<http::status>(status), body.dump(), "application/json");
}

RenderRequest parse_body(const std::string& text, int max_dimension) {
    json body;
    try {
        body = json::parse(text);
    } catch (const json::exception& e) {
        throw RequestError(400, std::string("malformed JSON: ") + e.what());
    }
    return parse_render_request(body, max_dimension);
}

Response handle(const RenderService& service, const Request& req) {
    const std::string target(req.target());
    if (req.method() == http::verb::options) {
        Response res = make_response(req, http::status::no_content, "", "text/plain");
        res.set(http::field::access_control_allow_methods, "GET, POST, OPTIONS");
        res.set(http::field::access_control_allow_headers, "Content-Type");
        return res;
    }
    if (target == "/api/info") {
        if (req.method() != http::verb::get) return error_response(req, 405, "use GET for /api/info");
        return make_response(req, http::status::ok, service.info().dump(), "application/json");
    }
    if (target == "/api/render") {
        if (req.method() != http::verb::post) return error_response(req, 405, "use POST for /api/render");
        try {
            const RenderRequest r = parse_body(req.body(), service.max_dimension());
            const std::vector<std::uint8_t> png = service.render_png(r);
            return make_response(req, http::status::ok, std::string(png.begin(), png.end()), "image/png");
        } catch (const RequestError& e) {
            return error_response(req, e.status, e.what());
        } catch (const std::exception& e) {
            spdlog::error("render failed: {}", e.what());
            return error_response(req, 500, e.what());
        }
    }
    return error_response(req, 404, "no endpoint at " + target);
}

std::string stream_frame(const std::string& id, const std::vector<std::uint8_t>& png) {
    std::string frame;
    frame.reserve(4 + id.size() + png.size());
    const auto n = static_cast<std::uint32_t>(id.size());
    for (int k = 0; k < 4; ++k) frame.push_back(static_cast<char>((n >> (8 * k)) & 0xffu));
    frame += id;
    frame.append(png.begin(), png.end());
    return frame;
}

void serve_stream(const RenderService& service, tcp::socket& socket, const Request& upgrade) {
    websocket::stream<tcp::socket&> ws(socket);
    ws.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws.accept(upgrade);
    beast::flat_buffer buffer;
    for (;;) {
        buffer.clear();
        ws.read(buffer);
        const std::string text = beast::buffers_to_string(buffer.data());
        std::string id;
        try {
            json body;
            try {
                body = json::parse(text);
            } catch (const json::exception& e) {
                throw RequestError(400, std::string("malformed JSON: ") + e.what());
            }
            if (body.is_object() && body.contains("id") && body["id"].is_string()) id = body["id"].get<std::string>();
            const RenderRequest r = parse_render_request(body, service.max_dimension());
            id = r.id;
            const std::string frame = stream_frame(r.id, service.render_png(r));
            ws.binary(true);
            ws.write(asio::buffer(frame));
        } catch (const RequestError& e) {
            const json err = {{"id", id}, {"error", e.what()}, {"status", e.status}};
            ws.text(true);
            ws.write(asio::buffer(err.dump()));
        } catch (const beast::system_error&) {
            throw;
        } catch (const std::exception& e) {
            spdlog::error("render failed: {}", e.what());
            const json err = {{"id", id}, {"error", e.what()}, {"status", 500}};
            ws.text(true);
            ws.write(asio::buffer(err.dump()));
        }
    }
}

}  // namespace

struct HttpServer::Impl {
    const RenderService& service;
    asio::io_context ioc{1};
    tcp::acceptor acceptor{ioc};
    std::mutex mutex;
    struct Session {
        std::shared_ptr<tcp::socket> socket;
        std::thread thread;
        bool done = false;
    };
    std::list<Session> sessions;
    bool stopping = false;

    explicit Impl(const RenderService& s) : service(s) {}

    void session(const std::shared_ptr<tcp::socket>& socket) {
        beast::error_code ec;
        try {
            beast::flat_buffer buffer;
            for (;;) {
                Request req;
                http::read(*socket, buffer, req, ec);
                if (ec) break;
                if (websocket::is_upgrade(req)) {
                    if (req.target() == "/api/stream") {
                        serve_stream(service, *socket, req);
                    } else {
                        http::write(*socket, error_response(req, 404, "no stream at " + std::string(req.target())), ec);
                    }
                    break;
                }
                Response res = handle(service, req);
                spdlog::debug("{} {} -> {}", std::string(req.method_string()), std::string(req.target()),
                              res.result_int());
                http::write(*socket, res, ec);
                if (ec || !res.keep_alive()) break;
            }
        } catch (const beast::system_error& e) {
            if (e.code() != websocket::error::closed) spdlog::debug("connection ended: {}", e.code().message());
        } catch (const std::exception& e) {
            spdlog::warn("connection failed: {}", e.what());
        }
        socket->shutdown(tcp::socket::shutdown_both, ec);
        socket->close(ec);
    }

    void accept() {
        auto socket = std::make_shared<tcp::socket>(ioc);
        acceptor.async_accept(*socket, [this, socket](beast::error_code ec) {
            if (ec) return;  // acceptor closed
            std::lock_guard<std::mutex> lock(mutex);
            if (stopping) return;
            reap();
            sessions.push_back({socket, {}, false});
            Session& s = sessions.back();
            s.thread = std::thread([this, socket, &s] {
                session(socket);
                std::lock_guard<std::mutex> inner(mutex);
                s.done = true;
            });
            accept();
        });
    }

    // Joins finished sessions; called with the mutex held.
    void reap() {
        for (auto it = sessions.begin(); it != sessions.end();) {
            if (it->done) {
                it->thread.join();
                it = sessions.erase(it);
            } else {
                ++it;
            }
        }
    }
};

HttpServer::HttpServer(const RenderService& service, const std::string& address, unsigned short port)
    : impl_(std::make_unique<Impl>(service)) {
    beast::error_code ec;
    const auto addr = asio::ip::make_address(address, ec);
    if (ec) throw StartupError("invalid bind address '" + address + "': " + ec.message());
    const tcp::endpoint endpoint(addr, port);
    impl_->acceptor.open(endpoint.protocol(), ec);
    if (!ec) impl_->acceptor.set_option(asio::socket_base::reuse_address(true), ec);
    if (!ec) impl_->acceptor.bind(endpoint, ec);
    if (!ec) impl_->acceptor.listen(asio::socket_base::max_listen_connections, ec);
    if (ec) throw StartupError("cannot listen on " + address + ":" + std::to_string(port) + ": " + ec.message());
}

HttpServer::~HttpServer() {
    stop();
    std::list<Impl::Session> rest;
    {
        std::lock_guard<std::mutex> lock(impl_->mutex);
        rest.swap(impl_->sessions);
    }
    for (auto& s : rest) {
        if (s.thread.joinable()) s.thread.join();
    }
}

unsigned short HttpServer::port() const { return impl_->acceptor.local_endpoint().port(); }

void HttpServer::run() {
    impl_->accept();
    impl_->ioc.run();
}

void HttpServer::stop() {
    {
        std::lock_guard<std::mutex> lock(impl_->mutex);
        if (impl_->stopping) return;
        impl_->stopping = true;
        for (auto& s : impl_->sessions) {
            beast::error_code ec;
            s.socket->shutdown(tcp::socket::shutdown_both, ec);
        }
    }
    asio::post(impl_->ioc, [this] {
        beast::error_code ec;
        impl_->acceptor.close(ec);
    });
    impl_->ioc.stop();
}

}  // namespace cogs
