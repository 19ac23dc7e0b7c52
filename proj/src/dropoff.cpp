#include "mint/dropoff.hpp"

#include <cmath>
#include <numeric>
#include <set>

#include "mint/parallel.hpp"
#include "mint/rng.hpp"
#include "mint/synthdata.hpp"

namespace mint {

namespace {

constexpr uint64_t kImageSlotBase = uint64_t{1} << 40;

bool valid_probability(double p) { return p >= 0.0 && p <= 1.0; }

Interval summarize_sims(const std::vector<double>& v) {
  Interval iv;
  const double n = static_cast<double>(v.size());
  iv.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  iv.lo = percentile(v, 2.5);
  iv.hi = percentile(v, 97.5);
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - iv.mean) * (x - iv.mean);
    iv.stderr_ = std::sqrt(ss / (n - 1.0) / n);
  }
  return iv;
}

struct CaseFlow {
  uint64_t key = 0;
  std::vector<std::pair<uint64_t, double>> screens;  // slot, p_drop
  int n_images = 0;
  bool correct = false;
};

std::vector<CaseFlow> case_flows(std::span<const EpisodeTranscript> transcripts, const FlowModel& flow,
                                 int k) {
  std::vector<CaseFlow> out;
  out.reserve(transcripts.size());
  for (const auto& t : transcripts) {
    CaseFlow cf;
    cf.key = static_cast<uint64_t>(t.case_id);
    std::set<int> touched;
    for (int f : t.acquired_fields()) touched.insert(flow.field_screen.at(f));
    for (int s : touched) cf.screens.emplace_back(static_cast<uint64_t>(static_cast<uint32_t>(s)), flow.p_screen(s));
    cf.n_images = t.n_images();
    cf.correct = t.label >= 0 && t.final_prediction.in_top_k(t.label, k);
    out.push_back(std::move(cf));
  }
  return out;
}

}  // namespace

double ImagesScreen::per_image() const {
  if (p_drop >= 1.0) return 1.0;
  return 1.0 - std::pow(1.0 - p_drop, 1.0 / static_cast<double>(n_images_nominal));
}

FlowModel FlowModel::defaults(const MetadataSchema& schema, double p_screen, double p_images) {
  FlowModel fm;
  for (int s : schema.screens()) fm.screens.push_back({s, p_screen});
  for (const auto& f : schema.fields()) fm.field_screen[f.id] = f.screen_id;
  fm.images.p_drop = p_images;
  return fm;
}

void FlowModel::validate(const MetadataSchema& schema) const {
  std::set<int> ids;
  for (const auto& s : screens) {
    if (!valid_probability(s.p_drop)) throw SchemaError("screen p_drop must lie in [0,1]");
    if (!ids.insert(s.screen_id).second) throw SchemaError("duplicate screen id " + std::to_string(s.screen_id));
  }
  if (!valid_probability(images.p_drop)) throw SchemaError("images p_drop must lie in [0,1]");
  if (images.n_images_nominal < 1) throw SchemaError("n_images_nominal must be positive");
  for (const auto& f : schema.fields()) {
    auto it = field_screen.find(f.id);
    if (it == field_screen.end()) throw SchemaError("field " + f.name + " has no screen");
    if (!ids.contains(it->second)) {
      throw SchemaError("field " + f.name + " maps to unknown screen " + std::to_string(it->second));
    }
  }
}

double FlowModel::p_screen(int screen_id) const {
  for (const auto& s : screens) {
    if (s.screen_id == screen_id) return s.p_drop;
  }
  throw SchemaError("unknown screen " + std::to_string(screen_id));
}

json FlowModel::to_json() const {
  json js = json::array();
  for (const auto& s : screens) js.push_back({{"screen_id", s.screen_id}, {"p_drop", s.p_drop}});
  json map = json::object();
  for (const auto& [f, s] : field_screen) map[std::to_string(f)] = s;
  return {{"screens", js},
          {"field_screen", map},
          {"images_screen", {{"p_drop", images.p_drop}, {"n_images_nominal", images.n_images_nominal}}}};
}

FlowModel FlowModel::from_json(const json& j) {
  FlowModel fm;
  for (const auto& s : j.at("screens")) fm.screens.push_back({s.at("screen_id"), s.at("p_drop")});
  for (const auto& [f, s] : j.at("field_screen").items()) fm.field_screen[std::stoi(f)] = s.get<int>();
  if (j.contains("images_screen")) {
    const auto& im = j.at("images_screen");
    fm.images.p_drop = im.value("p_drop", fm.images.p_drop);
    fm.images.n_images_nominal = im.value("n_images_nominal", fm.images.n_images_nominal);
  }
  return fm;
}

json interval_to_json(const Interval& iv) {
  return {{"mean", iv.mean}, {"ci_low", iv.lo}, {"ci_high", iv.hi}, {"stderr", iv.stderr_}};
}

json DropoffResult::to_json(bool with_traces) const {
  json j = {{"n_sims", n_sims},
            {"drop_rate", interval_to_json(drop_rate)},
            {"correct_shown_rate", interval_to_json(correct_shown_rate)}};
  if (with_traces) {
    j["per_sim_drop"] = per_sim_drop;
    j["per_sim_correct"] = per_sim_correct;
  }
  return j;
}

DropoffResult simulate_dropoff(std::span<const EpisodeTranscript> transcripts, const FlowModel& flow,
                               const MetadataSchema& schema, int n_sims, uint64_t seed, int k) {
  if (n_sims < 1) throw PreconditionError("n_sims must be at least 1");
  if (transcripts.empty()) throw PreconditionError("no transcripts to simulate");
  flow.validate(schema);
  const auto cases = case_flows(transcripts, flow, k);
  const double q = flow.images.per_image();
  DropoffResult r;
  r.n_sims = n_sims;
  r.per_sim_drop.assign(static_cast<size_t>(n_sims), 0.0);
  r.per_sim_correct.assign(static_cast<size_t>(n_sims), 0.0);
  parallel_for(static_cast<size_t>(n_sims), [&](size_t sim) {
    int dropped = 0;
    int shown = 0;
    for (const auto& c : cases) {
      bool drop = false;
      for (const auto& [slot, p] : c.screens) {
        if (keyed_uniform(seed, sim, c.key, slot) < p) {
          drop = true;
          break;
        }
      }
      for (int i = 0; i < c.n_images && !drop; ++i) {
        drop = keyed_uniform(seed, sim, c.key, kImageSlotBase + static_cast<uint64_t>(i)) < q;
      }
      dropped += drop;
      shown += !drop && c.correct;
    }
    const double n = static_cast<double>(cases.size());
    r.per_sim_drop[sim] = dropped / n;
    r.per_sim_correct[sim] = shown / n;
  });
  r.drop_rate = summarize_sims(r.per_sim_drop);
  r.correct_shown_rate = summarize_sims(r.per_sim_correct);
  return r;
}

json DropoffComparison::to_json() const {
  return {{"a", a.to_json()},
          {"b", b.to_json()},
          {"drop_delta", interval_to_json(drop_delta)},
          {"correct_shown_delta", interval_to_json(correct_delta)},
          {"drop_dominance", drop_dominance}};
}

DropoffComparison compare_dropoff(std::span<const EpisodeTranscript> a,
                                  std::span<const EpisodeTranscript> b, const FlowModel& flow,
                                  const MetadataSchema& schema, int n_sims, uint64_t seed, int k) {
  if (a.size() != b.size()) throw PreconditionError("transcript sets cover different numbers of cases");
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].case_id != b[i].case_id) throw PreconditionError("transcript sets cover different cases");
  }
  DropoffComparison c;
  c.a = simulate_dropoff(a, flow, schema, n_sims, seed, k);
  c.b = simulate_dropoff(b, flow, schema, n_sims, seed, k);
  std::vector<double> dd(static_cast<size_t>(n_sims)), dc(static_cast<size_t>(n_sims));
  int dominated = 0;
  for (size_t s = 0; s < dd.size(); ++s) {
    dd[s] = c.a.per_sim_drop[s] - c.b.per_sim_drop[s];
    dc[s] = c.a.per_sim_correct[s] - c.b.per_sim_correct[s];
    dominated += c.a.per_sim_drop[s] <= c.b.per_sim_drop[s];
  }
  c.drop_delta = summarize_sims(dd);
  c.correct_delta = summarize_sims(dc);
  c.drop_dominance = static_cast<double>(dominated) / n_sims;
  return c;
}

double expected_drop_rate(std::span<const EpisodeTranscript> transcripts, const FlowModel& flow,
                          const MetadataSchema& schema) {
  flow.validate(schema);
  if (transcripts.empty()) return 0.0;
  const double q = flow.images.per_image();
  double total = 0.0;
  for (const auto& c : case_flows(transcripts, flow, 3)) {
    double stay = std::pow(1.0 - q, c.n_images);
    for (const auto& sp : c.screens) stay *= 1.0 - sp.second;
    total += 1.0 - stay;
  }
  return total / static_cast<double>(transcripts.size());
}

}  // namespace mint
