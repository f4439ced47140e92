// Stand-alone stub verifier speaking the /v1/verify and /v1/assess wire
// format. Useful for trying the http backend without a model server.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "dvc/stub_server.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Stub verifier server"};
  std::string host = "127.0.0.1";
  int port = 8080;
  dvc::StubBehavior behavior;
  app.add_option("--host", host);
  app.add_option("--port", port);
  app.add_option("--fail-first", behavior.fail_first, "answer the first N requests with 500");
  app.add_option("--delay-ms", behavior.delay_ms, "sleep before every answer");
  app.add_option("--output", behavior.output, "raw verifier output to return");
  app.add_flag("--adverse", behavior.adverse, "report every frame as adverse");
  CLI11_PARSE(app, argc, argv);

  dvc::StubVerifierServer server(behavior);
  std::cerr << "listening on " << host << ':' << port << '\n';
  return server.serve_forever(host, port) ? 0 : 1;
}
