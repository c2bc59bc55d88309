#pragma once

#include <functional>
#include <map>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "moaserve/pdsim.hpp"
#include "moaserve/router.hpp"

namespace moaserve {

// Connects shell routers to a SimWorld: producer chunks and completions flow
// into consumer plans, plan actions flow back as engine calls. Drivers own
// the planned outputs so decoded token identities are independent of the
// schedule mode.
class SimDriver {
 public:
  SimDriver(SimWorld& world, ScheduleMode mode, int chunk_size);

  // Independent agent: prompt known upfront, forwarded straight to generate.
  void add_source(const AgentId& id, const EngineSpec& spec, const std::string& model_tag,
                  TokenSeq prompt, TokenSeq output);

  // Dependent agent driven by a slot-filling plan over its template.
  void add_plan(const AgentId& id, const EngineSpec& spec, const std::string& model_tag,
                PromptTemplate tmpl, TokenSeq output);

  // Issue initial actions (prefix prefills / source generates); call once,
  // before world.run().
  void start();

  // When a completion gate is installed, producer completions are handed to
  // it instead of propagating; the gate later calls release() or prune().
  void set_completion_gate(std::function<void(const AgentId&, double)> gate);
  // Propagate a (possibly deferred) completion to consumers.
  void release(const AgentId& producer);
  // Early-exit pruning: cancel the producer and re-plan its consumers.
  void prune(const AgentId& producer);

  bool has_plan(const AgentId& id) const { return plans_.count(id) > 0; }
  const SlotPlan& plan(const AgentId& id) const;
  const std::vector<AgentId>& agents() const { return order_; }

 private:
  void apply(const AgentId& id, const std::vector<RouteAction>& actions);
  void on_completion(const AgentId& producer, double t);
  int prefill_chunk_for(const AgentId& id) const;

  SimWorld& world_;
  ScheduleMode mode_;
  int chunk_size_;
  bool started_ = false;
  std::vector<AgentId> order_;
  std::map<AgentId, SlotPlan> plans_;
  std::map<AgentId, TokenSeq> planned_output_;
  std::map<AgentId, std::vector<AgentId>> consumers_;
  std::map<AgentId, bool> dependent_;
  std::function<void(const AgentId&, double)> gate_;
};

// Declarative single-query serving graph for the simulator. Token content is
// synthesized from the seed, so identical scenarios decode identical tokens
// in every schedule mode.
struct ScenarioAgent {
  AgentId id;
  EngineSpec engine;
  std::string model_tag = "default";

  // Independent agents: prompt_tokens of synthesized content. Dependent
  // agents: a template of prefix/separator/suffix literals around one slot
  // per dependency, in deps order.
  int prompt_tokens = 0;
  std::vector<AgentId> deps;
  int prefix_tokens = 0;
  int separator_tokens = 0;
  int suffix_tokens = 0;

  OutputLenDist output_len = OutputLenDist::fixed_len(16);
};

struct Scenario {
  std::vector<ScenarioAgent> agents;
  ScheduleMode mode = ScheduleMode::SequentialPd;
  int chunk_size = 32;
  std::uint64_t seed = 0;

  void validate() const;  // unique ids, known acyclic deps, positive sizes

  nlohmann::ordered_json to_json() const;
  static Scenario from_json(const nlohmann::ordered_json& j);
};

// Synthesized token content helpers (pure functions of the seed).
TokenSeq synth_tokens(std::uint64_t seed, const std::string& label, int count);
int sampled_output_len(const Scenario& s, const ScenarioAgent& a);

RunTrace run_scenario(const Scenario& s);
RunTrace run_scenario(const Scenario& s, ScheduleMode mode);
// Inspection hook invoked after the event loop drains, before the trace is
// finalized; lets callers read prompts/outputs/caches out of the world.
RunTrace run_scenario(const Scenario& s, ScheduleMode mode,
                      const std::function<void(const SimWorld&, const SimDriver&)>& inspect);

}  // namespace moaserve
