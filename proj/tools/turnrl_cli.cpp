// turnrl: train, evaluate and ablate token-level multi-turn agents on the
// hop-QA search task.

#include "turnrl/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using namespace turnrl;

namespace {

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string algorithm;
    bool no_loss_mask = false;
    bool no_advantage_mask = false;
    std::string out = "out";
    bool single_thread = false;
};

void add_common(CLI::App* app, CommonFlags& f) {
    app->add_option("--config", f.config, "JSON run config");
    app->add_option("--seed", f.seed, "training seed");
    app->add_option("--algorithm", f.algorithm,
                    "ppo | grpo | reinforce_pp | reinforce_pp_baseline | rloo");
    app->add_flag("--no-loss-mask", f.no_loss_mask, "include feedback tokens in the actor loss");
    app->add_flag("--no-advantage-mask", f.no_advantage_mask,
                  "run advantage estimation over every position");
    app->add_option("--out", f.out, "output directory");
    app->add_flag("--single-thread", f.single_thread, "collect episodes on one thread");
}

RunConfig resolve(const CommonFlags& f) {
    RunConfig cfg = f.config.empty() ? RunConfig{} : load_run_config(f.config);
    if (f.seed) cfg.seeds.train = *f.seed;
    if (!f.algorithm.empty()) cfg.rl.algorithm = algorithm_from_string(f.algorithm);
    if (f.no_loss_mask) cfg.rl.loss_mask_enabled = false;
    if (f.no_advantage_mask) cfg.rl.advantage_mask_enabled = false;
    if (f.single_thread)
        cfg.threads = 1;
    else if (f.config.empty())
        cfg.threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    cfg.validate();
    return cfg;
}

std::string fmt_opt(const std::optional<double>& x) {
    if (!x) return "-";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", *x);
    return buf;
}

int cmd_train(const CommonFlags& f, bool dump) {
    const RunConfig cfg = resolve(f);
    TrainOptions opts;
    opts.out_dir = fs::path(f.out);
    opts.dump_trajectories = dump;
    opts.on_update = [](const MetricsRow& r) {
        if (r.eval_em)
            std::cerr << "update " << r.update << " reward " << r.mean_episode_reward << " eval_em "
                      << *r.eval_em << " turns " << r.mean_turns << " t " << r.wall_clock_seconds
                      << "s\n";
    };
    const auto res = train(cfg, opts);
    std::cout << "algorithm " << to_string(cfg.rl.algorithm) << " seed " << cfg.seeds.train
              << "\nrandom_init_em " << fmt_opt(res.random_init_eval_em) << "\nuntrained_em "
              << fmt_opt(res.untrained_eval_em) << "\nfinal_em " << fmt_opt(res.final_eval.mean_em)
              << "\noutput " << f.out << "\n";
    return 0;
}

int cmd_eval(const CommonFlags& f, const std::string& checkpoint, const std::string& instances,
             bool scripted) {
    const RunConfig cfg = resolve(f);
    const Vocabulary vocab = cfg.vocabulary();
    std::vector<hopqa::Instance> set;
    if (instances.empty()) {
        set = make_eval_set(cfg, vocab);
    } else {
        std::ifstream in(instances);
        if (!in) throw ConfigError("cannot open " + instances);
        for (std::string line; std::getline(in, line);)
            if (!line.empty())
                set.push_back(hopqa::instance_from_json(nlohmann::json::parse(line), vocab));
    }
    EvalReport report;
    if (scripted) {
        report = evaluate(ScriptedPolicy(hopqa::ScriptedAgent(vocab)), set, vocab, cfg.env,
                          cfg.task.search_k, cfg.threads);
    } else {
        const fs::path ck = checkpoint.empty() ? fs::path(f.out) / "checkpoint.txt" : fs::path(checkpoint);
        std::ifstream in(ck);
        if (!in) throw ConfigError("cannot open checkpoint " + ck.string());
        const auto [params, header] = load_checkpoint(in);
        if (params.dims.vocab != static_cast<int>(vocab.size()))
            throw DimensionError("checkpoint vocabulary does not match the config");
        report = evaluate(NetworkPolicy(params, vocab.reserved().pad), set, vocab, cfg.env,
                          cfg.task.search_k, cfg.threads);
    }
    fs::create_directories(f.out);
    std::ofstream os(fs::path(f.out) / "eval.jsonl", std::ios::binary);
    for (const auto& r : report.records) os << to_json(r, vocab).dump() << '\n';
    std::cout << "instances " << set.size() << "\nmean_em " << fmt_opt(report.mean_em) << "\n";
    return 0;
}

int cmd_ablate(const CommonFlags& f) {
    const RunConfig cfg = resolve(f);
    fs::create_directories(f.out);
    const auto report = run_ablation(cfg, cfg.rl.algorithm, [](const AblationRow& r) {
        std::cerr << r.arm << " seed " << r.seed << " eval_em " << r.eval_em << "\n";
    });
    std::ofstream os(fs::path(f.out) / "ablation.csv", std::ios::binary);
    write_ablation_csv(os, report);
    for (const auto& arm : report.arms)
        std::cout << arm.name << " median_em " << fmt_opt(report.median(arm.name)) << "\n";
    return 0;
}

int cmd_manifest(const CommonFlags& f) {
    const RunConfig cfg = resolve(f);
    ToolRegistry reg;
    reg.add(hopqa::search_spec());
    std::cout << render_tool_manifest(reg.specs());
    return 0;
}

// Minimal SVG line chart of metrics.csv: one panel per numeric column.
int cmd_plot(const std::string& metrics, const std::string& output) {
    std::ifstream in(metrics);
    if (!in) throw ConfigError("cannot open " + metrics);
    std::string header;
    std::getline(in, header);
    std::vector<std::string> names;
    {
        std::stringstream ss(header);
        for (std::string c; std::getline(ss, c, ',');) names.push_back(c);
    }
    std::map<std::size_t, std::vector<std::pair<double, double>>> series;
    for (std::string line; std::getline(in, line);) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
        if (cells.empty()) continue;
        const double x = std::stod(cells[0]);
        for (std::size_t k = 1; k < cells.size() && k < names.size(); ++k)
            if (!cells[k].empty()) series[k].emplace_back(x, std::stod(cells[k]));
    }
    const int pw = 360, ph = 200, cols = 2;
    const int rows = static_cast<int>((series.size() + cols - 1) / cols);
    std::ofstream os(output, std::ios::binary);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << cols * pw << "\" height=\""
       << rows * ph << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    int panel = 0;
    for (const auto& [k, pts] : series) {
        const int ox = (panel % cols) * pw, oy = (panel / cols) * ph;
        ++panel;
        double x0 = pts.front().first, x1 = x0, y0 = pts.front().second, y1 = y0;
        for (const auto& [x, y] : pts) {
            x0 = std::min(x0, x), x1 = std::max(x1, x);
            y0 = std::min(y0, y), y1 = std::max(y1, y);
        }
        if (x1 == x0) x1 = x0 + 1;
        if (y1 == y0) y1 = y0 + 1;
        const double L = ox + 50, R = ox + pw - 10, T = oy + 25, B = oy + ph - 25;
        os << "<text x=\"" << ox + 10 << "\" y=\"" << oy + 15 << "\">" << names[k] << "</text>\n"
           << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << R - L << "\" height=\""
           << B - T << "\" fill=\"none\" stroke=\"#999\"/>\n"
           << "<text x=\"" << ox + 5 << "\" y=\"" << T + 10 << "\">" << fmt_opt(y1) << "</text>\n"
           << "<text x=\"" << ox + 5 << "\" y=\"" << B << "\">" << fmt_opt(y0) << "</text>\n"
           << "<polyline fill=\"none\" stroke=\"#1f77b4\" points=\"";
        for (const auto& [x, y] : pts)
            os << L + (x - x0) / (x1 - x0) * (R - L) << ',' << B - (y - y0) / (y1 - y0) * (B - T) << ' ';
        os << "\"/>\n";
    }
    os << "</svg>\n";
    std::cout << "wrote " << output << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Token-level RL for multi-turn tool-using agents"};
    app.require_subcommand(1);

    CommonFlags train_f, eval_f, ablate_f, manifest_f;
    bool dump = false;
    auto* train_cmd = app.add_subcommand("train", "train a policy and write metrics.csv, eval.jsonl, checkpoint");
    add_common(train_cmd, train_f);
    train_cmd->add_flag("--dump-trajectories", dump, "write every rollout to trajectories.jsonl");

    std::string checkpoint, instances;
    bool scripted = false;
    auto* eval_cmd = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
    add_common(eval_cmd, eval_f);
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file (default <out>/checkpoint.txt)");
    eval_cmd->add_option("--instances", instances, "JSONL instance set (default: config eval set)");
    eval_cmd->add_flag("--scripted", scripted, "evaluate the gold-chain scripted agent instead");

    auto* ablate_cmd = app.add_subcommand("ablate", "mask ablation over the configured seeds");
    add_common(ablate_cmd, ablate_f);

    auto* manifest_cmd = app.add_subcommand("dump-manifest", "print the tool manifest");
    add_common(manifest_cmd, manifest_f);

    std::string metrics = "out/metrics.csv", plot_out = "out/metrics.svg";
    auto* plot_cmd = app.add_subcommand("plot", "render metrics.csv as an SVG chart");
    plot_cmd->add_option("--metrics", metrics, "metrics.csv path");
    plot_cmd->add_option("--output", plot_out, "SVG output path");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*train_cmd) return cmd_train(train_f, dump);
        if (*eval_cmd) return cmd_eval(eval_f, checkpoint, instances, scripted);
        if (*ablate_cmd) return cmd_ablate(ablate_f);
        if (*manifest_cmd) return cmd_manifest(manifest_f);
        if (*plot_cmd) return cmd_plot(metrics, plot_out);
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return 0;
}
