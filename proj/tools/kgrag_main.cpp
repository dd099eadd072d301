#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kgrag/error.hpp"
#include "kgrag/pipeline.hpp"

namespace {

constexpr int kConfigExit = 2;
constexpr int kPrerequisiteExit = 3;
constexpr int kServiceExit = 4;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-graph retrieval and question answering pipeline"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  bool print_config = false;

  const char* stages[][2] = {
      {"synth", "generate a synthetic KG with planted multi-hop questions"},
      {"ingest", "extract candidate subgraphs around topic entities"},
      {"label", "derive shortest-path weak labels"},
      {"import-labels", "import externally labelled relevant triples"},
      {"embed", "embed entity and relation texts"},
      {"train", "train the triple scorer"},
      {"retrieve", "score candidates and keep the top K"},
      {"reason", "query the LLM reasoner with retrieved triples"},
      {"eval", "compute retrieval and QA metrics"},
      {"all", "run ingest through eval"},
  };
  for (const auto& [name, help] : stages) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--set", overrides, "override a config key: dotted.key=value");
    sub->add_flag("--print-config", print_config, "print the resolved config before running");
  }
  CLI11_PARSE(app, argc, argv);
  const std::string stage_name = app.get_subcommands().front()->get_name();

  try {
    kgrag::PipelineConfig config = kgrag::load_config(config_path, overrides);
    if (print_config) std::cout << kgrag::config_json(config);
    if (stage_name == "all") {
      kgrag::run_all(config, std::cout);
    } else {
      kgrag::StageResult result = kgrag::run_stage(kgrag::parse_stage(stage_name), config, std::cout);
      std::cout << stage_name << ": " << result.summary << "\n";
    }
  } catch (const kgrag::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const kgrag::PrerequisiteError& e) {
    std::cerr << "prerequisite error: " << e.what() << "\n";
    return kPrerequisiteExit;
  } catch (const kgrag::ServiceError& e) {
    std::cerr << "service error: " << e.what() << "\n";
    return kServiceExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
