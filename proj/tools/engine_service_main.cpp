// Standalone arithmetic serving engine speaking the split prefill/generate
// HTTP interface. Time is virtual: responses report the computed schedule.
//
// Exit codes: 0 success, 2 invalid flags, 3 runtime failure.

#include <iostream>
#include <string>

#include "moaserve/engine_service.hpp"
#include "moaserve/errors.hpp"

// httplib must follow the project headers: it drags in system headers whose
// macros corrupt Eigen templates when seen first.
#include <CLI11.hpp>
#include <httplib.h>

int main(int argc, char** argv) {
  CLI::App app{"virtual-time serving engine with split prefill/generate routes"};

  std::string host = "127.0.0.1";
  int port = 8080;
  moaserve::EngineSpec spec;
  int chunk_size = 32;
  bool no_prefill_route = false;

  app.add_option("--host", host, "bind address");
  app.add_option("--port", port, "port (0 picks an ephemeral port)");
  app.add_option("--prefill-rate", spec.prefill_rate, "prefill tokens/s");
  app.add_option("--decode-rate", spec.decode_rate, "decode tokens/s");
  app.add_option("--startup-overhead", spec.prefill_startup_overhead,
                 "seconds charged per prefill request");
  app.add_option("--kv-transfer-per-block", spec.kv_transfer_per_block,
                 "seconds per KV block handed to the decoder");
  app.add_option("--kv-block-tokens", spec.kv_block_tokens, "tokens per KV block");
  app.add_option("--chunk-size", chunk_size, "default decode streaming chunk (tokens)");
  app.add_flag("--no-prefill-route", no_prefill_route,
               "serve only /generate, emulating a backend without the split entrypoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    spec.validate("engine");
    if (chunk_size <= 0) throw moaserve::ValidationError("chunk-size: must be positive");
    if (port < 0 || port > 65535) throw moaserve::ValidationError("port: out of range");

    moaserve::EngineService service(spec, chunk_size);
    httplib::Server server;
    if (no_prefill_route) {
      service.attach_without_prefill(server);
    } else {
      service.attach(server);
    }

    int bound = port;
    if (port == 0) {
      bound = server.bind_to_any_port(host);
      if (bound < 0) throw moaserve::RunError("cannot bind to " + host);
    } else if (!server.bind_to_port(host, port)) {
      throw moaserve::RunError("cannot bind to " + host + ":" + std::to_string(port));
    }
    std::cout << "listening on " << host << ":" << bound << std::endl;
    if (!server.listen_after_bind()) throw moaserve::RunError("server stopped unexpectedly");
    return 0;
  } catch (const moaserve::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
