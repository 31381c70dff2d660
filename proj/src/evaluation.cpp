// Copyright 2026 The flare Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "flare/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

namespace flare {

namespace fs = std::filesystem;
using nlohmann::json;

json EvalReport::to_json() const {
  json suite_json = json::array();
  for (const auto& t : suite) suite_json.push_back(t.task_id);
  json cks = json::array();
  for (const auto& c : checkpoints) {
    json per_task = json::object();
    for (const auto& [id, rate] : c.per_task) per_task[std::to_string(id)] = rate;
    cks.push_back({{"step", c.step},
                   {"label", c.label},
                   {"aggregate", c.aggregate},
                   {"per_task", per_task},
                   {"nan_episodes", c.nan_episodes}});
  }
  return {{"suite", suite_json},
          {"episodes_per_task", episodes_per_task},
          {"seed", seed},
          {"checkpoints", cks},
          {"selected_score", selected_score},
          {"selected_step", checkpoints.empty() ? json(nullptr) : json(checkpoints[selected_index].step)}};
}

std::size_t select_checkpoint(const std::vector<double>& aggregates) {
  if (aggregates.empty()) throw std::invalid_argument("select_checkpoint: no checkpoints");
  const std::size_t first = aggregates.size() > 5 ? aggregates.size() - 5 : 0;
  std::size_t best = first;
  for (std::size_t i = first; i < aggregates.size(); ++i) {
    if (aggregates[i] >= aggregates[best]) best = i;
  }
  return best;
}

void finalize_report(EvalReport& report) {
  std::vector<double> agg;
  for (const auto& c : report.checkpoints) agg.push_back(c.aggregate);
  report.selected_index = select_checkpoint(agg);
  report.selected_score = agg[report.selected_index];
}

datagen::WorldState eval_initial_state(const datagen::TaskSpec& task, int episode, std::uint64_t seed,
                                       const datagen::EnvConfig& env) {
  Rng rng(derive_seed(seed, fnv1a("eval"), task.task_id, episode));
  return datagen::sample_initial_state(task, rng, env);
}

CheckpointEval evaluate_policy(const datagen::BatchChunkPolicy& policy, const std::vector<datagen::TaskSpec>& suite,
                               int episodes_per_task, std::uint64_t seed, const datagen::EnvConfig& env) {
  if (suite.empty()) throw std::invalid_argument("evaluate: empty suite");
  if (episodes_per_task < 1) throw std::invalid_argument("evaluate: episodes_per_task must be >= 1");
  std::vector<datagen::TaskSpec> tasks;
  std::vector<datagen::WorldState> initial;
  for (const auto& task : suite) {
    for (int e = 0; e < episodes_per_task; ++e) {
      tasks.push_back(task);
      initial.push_back(eval_initial_state(task, e, seed, env));
    }
  }
  const auto r = datagen::rollout_batch(policy, tasks, initial, env.episode_horizon, env);
  CheckpointEval out;
  std::size_t k = 0;
  int total = 0;
  for (const auto& task : suite) {
    int wins = 0;
    for (int e = 0; e < episodes_per_task; ++e, ++k) {
      wins += r.success[k] ? 1 : 0;
      out.nan_episodes += r.nan_flag[k] ? 1 : 0;
    }
    out.per_task[task.task_id] = static_cast<double>(wins) / episodes_per_task;
    total += wins;
  }
  out.aggregate = static_cast<double>(total) / static_cast<double>(tasks.size());
  return out;
}

datagen::BatchChunkPolicy learned_policy(const FlarePolicy& policy, const TrainConfig& cfg,
                                         const datagen::EnvConfig& env, std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  FlarePolicy model = policy;
  model->eval();
  const auto flow = cfg.flow;
  const auto dtype = cfg.scalar_type();
  return [model, flow, dtype, env, rng](const std::vector<datagen::Observation>& obs,
                                        const std::vector<datagen::StateVec>& q,
                                        const std::vector<datagen::WorldState>&) mutable {
    torch::NoGradGuard no_grad;
    auto phi = model->embed(stack_images(obs), stack_tokens(obs));
    auto qt = stack_states(q, dtype);
    flowmatch::VelocityField field = [&](const torch::Tensor& p, const torch::Tensor& a, const torch::Tensor& s,
                                         double tau) { return model->velocity(p, a, s, tau); };
    std::vector<std::vector<datagen::Action>> out(obs.size());
    torch::Tensor chunk;
    try {
      chunk = flowmatch::euler_integrate(field, phi, qt, flow, *rng).to(torch::kFloat32).contiguous();
    } catch (const std::runtime_error&) {
      // Non-finite field: report NaN chunks so the rollout flags the episodes.
      for (auto& c : out) c.assign(1, {NAN, NAN, NAN});
      return out;
    }
    const auto* data = chunk.data_ptr<float>();
    for (std::size_t b = 0; b < obs.size(); ++b) {
      for (int h = 0; h < flow.H; ++h) {
        const float* a = data + (b * static_cast<std::size_t>(flow.H) + static_cast<std::size_t>(h)) * 3;
        out[b].push_back(datagen::denormalize_action({a[0], a[1], a[2]}, env));
      }
    }
    return out;
  };
}

EvalReport evaluate_policies(const std::vector<LabeledPolicy>& policies, const std::vector<datagen::TaskSpec>& suite,
                             int episodes_per_task, std::uint64_t seed, const datagen::EnvConfig& env) {
  if (policies.empty()) throw std::invalid_argument("evaluate: no checkpoints");
  EvalReport report;
  report.suite = suite;
  report.episodes_per_task = episodes_per_task;
  report.seed = seed;
  for (const auto& p : policies) {
    auto c = evaluate_policy(p.policy, suite, episodes_per_task, seed, env);
    c.step = p.step;
    c.label = p.label;
    report.checkpoints.push_back(std::move(c));
  }
  finalize_report(report);
  return report;
}

namespace {

void check_suite_fits(const std::vector<datagen::TaskSpec>& suite, const datagen::EnvConfig& env) {
  for (const auto& t : suite) {
    if (t.task_id < 0 || t.task_id >= env.n_colors * env.n_zones || !(datagen::task_by_id(t.task_id, env) == t)) {
      throw std::invalid_argument("evaluate: task " + std::to_string(t.task_id) +
                                  " does not match the checkpoint environment");
    }
  }
}

}  // namespace

EvalReport evaluate(const std::vector<fs::path>& checkpoints, const std::vector<datagen::TaskSpec>& suite,
                    int episodes_per_task, std::uint64_t seed) {
  if (checkpoints.empty()) throw std::invalid_argument("evaluate: no checkpoints");
  std::optional<datagen::EnvConfig> env;
  EvalReport report;
  report.suite = suite;
  report.episodes_per_task = episodes_per_task;
  report.seed = seed;
  for (const auto& path : checkpoints) {
    CheckpointInfo info;
    auto state = load_checkpoint(path, &info);
    if (!env) {
      env = info.env;
      check_suite_fits(suite, *env);
    } else if (env->to_json() != info.env.to_json()) {
      throw std::invalid_argument("evaluate: " + path.string() + " was trained in a different environment");
    }
    auto policy = learned_policy(state.policy, state.cfg, *env, derive_seed(seed, fnv1a("euler"), info.step));
    auto c = evaluate_policy(policy, suite, episodes_per_task, seed, *env);
    c.step = info.step;
    c.label = path.filename().string();
    report.checkpoints.push_back(std::move(c));
  }
  finalize_report(report);
  return report;
}

std::vector<datagen::TaskSpec> parse_suite(const std::string& spec, const datagen::EnvConfig& env,
                                           const std::vector<datagen::TaskSpec>& fallback) {
  if (spec.empty()) return fallback;
  std::vector<datagen::TaskSpec> suite;
  std::stringstream ss(spec);
  for (std::string item; std::getline(ss, item, ',');) {
    std::size_t used = 0;
    int id = 0;
    try {
      id = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw std::invalid_argument("suite: '" + item + "' is not a task id");
    suite.push_back(datagen::task_by_id(id, env));
  }
  return suite;
}

json AblationGrid::to_json() const {
  json cells = json::array();
  for (std::size_t i = 0; i < values.size(); ++i) {
    json cell = {{"value", values[i]}, {"report", reports.at(i).to_json()}};
    if (i < run_dirs.size()) cell["run_dir"] = run_dirs[i].string();
    cells.push_back(cell);
  }
  return {{"axis", axis}, {"cells", cells}};
}

TrainConfig apply_axis(const TrainConfig& base, const std::string& axis, const std::string& value) {
  TrainConfig c = base;
  auto number = [&] {
    std::size_t used = 0;
    double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("ablate: bad value '" + value + "'");
    return v;
  };
  if (axis == "lambda") {
    c.flare.lambda = number();
  } else if (axis == "L_tap" || axis == "tap_layer") {
    const double v = number();
    if (v != std::floor(v)) throw std::invalid_argument("ablate: L_tap must be an integer, got '" + value + "'");
    c.flare.tap_layer = static_cast<int>(v);
  } else if (axis == "ema_rho") {
    c.flare.ema_rho = number();
  } else if (axis == "target_embedding") {
    c.flare.target_embedding = value;
  } else {
    throw std::invalid_argument("ablate: unknown axis '" + axis + "' (lambda, L_tap, ema_rho, target_embedding)");
  }
  return c;
}

AblationGrid ablate(const std::string& axis, const std::vector<std::string>& values, const TrainConfig& base,
                    const FitData& data, std::uint64_t seed, const AblateOptions& options) {
  if (values.empty()) throw std::invalid_argument("ablate: no values");
  AblationGrid grid;
  grid.axis = axis;
  grid.values = values;
  std::vector<TrainConfig> cells;
  for (const auto& v : values) {
    auto c = apply_axis(base, axis, v);
    c.seed = seed;
    c.bind_env(data.labeled.front()->env);
    c.validate();
    cells.push_back(c);
  }
  const auto suite = options.suite.empty() ? data.labeled.front()->suite : options.suite;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto dir = options.out_dir / (axis + "_" + values[i]);
    FitOptions fo;
    fo.out_dir = dir;
    fo.init_embedding = options.init_embedding;
    auto run = fit(data, cells[i], fo);
    std::vector<fs::path> last(run.checkpoints.end() - std::min<std::ptrdiff_t>(5, std::ssize(run.checkpoints)),
                               run.checkpoints.end());
    grid.reports.push_back(evaluate(last, suite, options.episodes_per_task, seed));
    grid.run_dirs.push_back(dir);
  }
  fs::create_directories(options.out_dir);
  std::ofstream(options.out_dir / ("grid_" + axis + ".json")) << grid.to_json().dump(2) << '\n';
  emit_ablation_plot(grid, options.out_dir);
  return grid;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += ch;
    }
  }
  return out;
}

constexpr double kW = 480, kH = 320, kLeft = 56, kRight = 16, kTop = 36, kBottom = 48;

// Frame with a [0, 1] success axis.
std::string frame(const std::string& title, const std::string& xlabel) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" << escape(title) << "</text>\n";
  const double plot_h = kH - kTop - kBottom;
  for (int i = 0; i <= 4; ++i) {
    const double y = kTop + plot_h * (1.0 - i / 4.0);
    s << "<line x1=\"" << kLeft << "\" x2=\"" << kW - kRight << "\" y1=\"" << y << "\" y2=\"" << y
      << "\" stroke=\"#ddd\"/>\n<text x=\"" << kLeft - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">"
      << fmt(i / 4.0) << "</text>\n";
  }
  s << "<text x=\"14\" y=\"" << kTop + plot_h / 2 << "\" transform=\"rotate(-90 14 " << kTop + plot_h / 2
    << ")\" text-anchor=\"middle\">success</text>\n<text x=\"" << (kLeft + kW - kRight) / 2 << "\" y=\"" << kH - 8
    << "\" text-anchor=\"middle\">" << escape(xlabel) << "</text>\n";
  return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

std::vector<fs::path> emit_plots(const std::vector<EvalReport>& reports, const fs::path& dir, const std::string& stem) {
  if (reports.empty()) throw std::invalid_argument("emit_plots: no reports");
  fs::create_directories(dir);
  std::vector<fs::path> files;
  const double plot_w = kW - kLeft - kRight;
  const double plot_h = kH - kTop - kBottom;
  for (std::size_t r = 0; r < reports.size(); ++r) {
    const auto& rep = reports[r];
    if (rep.checkpoints.empty()) throw std::invalid_argument("emit_plots: report without checkpoints");
    const auto& sel = rep.checkpoints[rep.selected_index];
    std::string svg = frame("success per task (" + sel.label + ", selected " + fmt(rep.selected_score) + ")", "task");
    const double slot = plot_w / static_cast<double>(sel.per_task.size());
    std::size_t i = 0;
    std::ostringstream bars;
    for (const auto& [id, rate] : sel.per_task) {
      const double x = kLeft + slot * static_cast<double>(i) + slot * 0.15;
      const double h = plot_h * rate;
      bars << "<rect x=\"" << x << "\" y=\"" << kTop + plot_h - h << "\" width=\"" << slot * 0.7 << "\" height=\"" << h
           << "\" fill=\"#4c72b0\"/>\n<text x=\"" << x + slot * 0.35 << "\" y=\"" << kTop + plot_h + 14
           << "\" text-anchor=\"middle\">" << id << "</text>\n";
      ++i;
    }
    svg += bars.str() + "</svg>\n";
    char name[128];
    std::snprintf(name, sizeof(name), "%s_%zu_per_task.svg", stem.c_str(), r);
    write_text(dir / name, svg);
    files.push_back(dir / name);
  }
  return files;
}

fs::path emit_ablation_plot(const AblationGrid& grid, const fs::path& dir) {
  if (grid.reports.empty()) throw std::invalid_argument("emit_ablation_plot: empty grid");
  fs::create_directories(dir);
  const double plot_w = kW - kLeft - kRight;
  const double plot_h = kH - kTop - kBottom;
  std::string svg = frame("selected success vs " + grid.axis, grid.axis);
  const auto n = grid.reports.size();
  std::ostringstream line, marks;
  line << "<polyline fill=\"none\" stroke=\"#c44e52\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < n; ++i) {
    const double x = kLeft + plot_w * (n == 1 ? 0.5 : static_cast<double>(i) / static_cast<double>(n - 1)) * 0.9 + plot_w * 0.05;
    const double y = kTop + plot_h * (1.0 - grid.reports[i].selected_score);
    line << x << "," << y << " ";
    marks << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"3.5\" fill=\"#c44e52\"/>\n<text x=\"" << x << "\" y=\""
          << kTop + plot_h + 14 << "\" text-anchor=\"middle\">" << escape(grid.values[i]) << "</text>\n";
  }
  line << "\"/>\n";
  svg += line.str() + marks.str() + "</svg>\n";
  const auto path = dir / ("ablation_" + grid.axis + ".svg");
  write_text(path, svg);
  return path;
}

}  // namespace flare
