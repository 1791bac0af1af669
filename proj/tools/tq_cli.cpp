// tq — train, evaluate, export and benchmark b1.58 ternary models.
//
// Exit codes: 0 ok, 1 usage/config, 2 data, 3 integrity, 4 numeric.
// stdout carries data (predictions, JSONL reports); stderr carries
// diagnostics.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tq/tq.hpp"

namespace {

std::string default_data_dir() {
    const char* env = std::getenv("TQ_DATA_DIR");
    return env && *env ? env : "data";
}

int cmd_train(const std::string& config, const std::string& data_dir, const std::string& out_override,
              const std::vector<uint64_t>& seed_override, int jobs, bool allow_fetch, bool save_model) {
    tq::ExperimentSpec spec = tq::load_experiment(config);
    if (!out_override.empty()) spec.out_dir = out_override;
    if (!seed_override.empty()) spec.seeds = seed_override;
    if (save_model) spec.save_model = true;
    tq::RunResult res = tq::run_experiment(spec, data_dir, jobs, allow_fetch);
    std::cerr << "wrote " << res.metrics_files.size() << " metrics file(s) under " << spec.out_dir << "\n";
    std::cout << res.summary.dump(2) << "\n";
    return 0;
}

int cmd_eval(const std::string& model_path, const std::string& tsv_path, int threads) {
    tq::TernaryModel m = tq::load_model_file(model_path);
    tq::TsvData d = tq::load_tsv_features(tsv_path, /*with_labels=*/true);
    if (m.layers.empty() || m.layers.front().in_dim != d.f)
        throw tq::data_error("eval: model expects " +
                             std::to_string(m.layers.empty() ? 0 : m.layers.front().in_dim) +
                             " features, data has " + std::to_string(d.f));
    std::vector<float> out = tq::model_infer(m, d.features, d.n, threads);
    int classes = m.layers.back().out_dim;
    int ok = 0;
    for (int i = 0; i < d.n; ++i)
        ok += tq::argmax_row(out.data() + size_t(i) * size_t(classes), classes) == d.labels[size_t(i)];
    nlohmann::json rep = {{"n", d.n}, {"accuracy", d.n ? double(ok) / double(d.n) : 0.0}};
    std::cout << rep.dump() << "\n";
    return 0;
}

int cmd_export(const std::string& ckpt_path, const std::string& out_path) {
    tq::Checkpoint ck = tq::load_checkpoint(ckpt_path);
    tq::save_model_file(tq::export_model(ck.model), out_path);
    std::cerr << "exported " << out_path << "\n";
    return 0;
}

int cmd_infer(const std::string& model_path, const std::string& tsv_path, int threads) {
    tq::TernaryModel m = tq::load_model_file(model_path);
    tq::TsvData d = tq::load_tsv_features(tsv_path, /*with_labels=*/false);
    if (m.layers.empty() || m.layers.front().in_dim != d.f)
        throw tq::data_error("infer: model expects " +
                             std::to_string(m.layers.empty() ? 0 : m.layers.front().in_dim) +
                             " features, data has " + std::to_string(d.f));
    std::vector<float> out = tq::model_infer(m, d.features, d.n, threads);
    int classes = m.layers.back().out_dim;
    for (int i = 0; i < d.n; ++i)
        std::cout << tq::argmax_row(out.data() + size_t(i) * size_t(classes), classes) << "\n";
    return 0;
}

int cmd_bench(const std::string& model_path, int batch, int repeats, int threads) {
    tq::TernaryModel m = tq::load_model_file(model_path);
    tq::BenchReport r = tq::bench_model(m, batch, repeats, threads);
    for (const nlohmann::json& line : r.to_jsonl()) std::cout << line.dump() << "\n";
    return 0;
}

int cmd_fetch(const std::string& name, const std::string& data_dir, const std::string& url,
              const std::string& sha) {
    tq::FetchResult res = tq::fetch_dataset(name, data_dir, url, sha);
    std::cerr << (res.already_present ? "already present: " : "fetched: ") << res.dir << "\n";
    return 0;
}

int cmd_smooth(const std::string& path, int window, int polyorder, const std::string& metric,
               const std::string& split) {
    std::vector<tq::MetricsRecord> recs = tq::read_jsonl(path);
    // group by (run, seed), preserve encounter order
    std::vector<std::pair<std::string, uint64_t>> groups;
    std::map<std::pair<std::string, uint64_t>, std::vector<tq::MetricsRecord>> by_group;
    for (const tq::MetricsRecord& r : recs) {
        if (r.metric != metric || r.split != split) continue;
        auto key = std::make_pair(r.run, r.seed);
        if (!by_group.count(key)) groups.push_back(key);
        by_group[key].push_back(r);
    }
    for (auto& key : groups) {
        auto& rows = by_group[key];
        std::vector<double> vals(rows.size());
        for (size_t i = 0; i < rows.size(); ++i) vals[i] = rows[i].value;
        std::vector<double> smooth = tq::savgol_smooth(vals, window, polyorder);
        for (size_t i = 0; i < rows.size(); ++i) {
            nlohmann::json j = {{"run", rows[i].run},   {"seed", rows[i].seed},
                                {"step", rows[i].step}, {"split", rows[i].split},
                                {"metric", metric + "_sg"}, {"value", smooth[i]}};
            std::cout << j.dump() << "\n";
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tq: b1.58 ternary quantization-aware training toolkit"};
    app.require_subcommand(1);
    std::string data_dir = default_data_dir();

    // train
    auto* train = app.add_subcommand("train", "run an experiment config (seed sweep + summary)");
    std::string train_config, train_out;
    std::vector<uint64_t> train_seeds;
    int train_jobs = 2;
    bool train_fetch = false, train_save = false;
    train->add_option("config", train_config, "experiment config (JSON, // comments allowed)")->required();
    train->add_option("--data-dir", data_dir, "dataset directory (env TQ_DATA_DIR)");
    train->add_option("--out", train_out, "output directory override");
    train->add_option("--seed", train_seeds, "seed override (repeatable)");
    train->add_option("--jobs", train_jobs, "parallel seed workers");
    train->add_flag("--fetch", train_fetch, "fetch missing datasets");
    train->add_flag("--save-model", train_save, "write .tqcp checkpoint and .tq58 export per seed");

    // eval
    auto* eval = app.add_subcommand("eval", "recompute test metrics of a packed model on a labeled TSV");
    std::string eval_model, eval_tsv;
    int eval_threads = 1;
    eval->add_option("model", eval_model, "TQ58 model file")->required();
    eval->add_option("data", eval_tsv, "TSV: feature columns then an integer label column")->required();
    eval->add_option("--threads", eval_threads, "row-parallel inference threads");

    // export
    auto* exp = app.add_subcommand("export", "convert a .tqcp checkpoint into a packed .tq58 model");
    std::string export_in, export_out;
    exp->add_option("model", export_in, "TQCP checkpoint written by train --save-model")->required();
    exp->add_option("out", export_out, "output TQ58 path")->required();

    // infer
    auto* infer = app.add_subcommand("infer", "classify TSV rows with a packed model");
    std::string infer_model, infer_tsv;
    int infer_threads = 1;
    infer->add_option("model", infer_model, "TQ58 model file")->required();
    infer->add_option("data", infer_tsv, "TSV of feature columns")->required();
    infer->add_option("--threads", infer_threads, "row-parallel inference threads");

    // bench
    auto* bench = app.add_subcommand("bench", "throughput and memory report (JSONL on stdout)");
    std::string bench_model;
    int bench_batch = 32, bench_repeats = 100, bench_threads = 1;
    bench->add_option("model", bench_model, "TQ58 model file")->required();
    bench->add_option("--batch", bench_batch, "rows per inference");
    bench->add_option("--repeats", bench_repeats, "timed repetitions (0 = sizes only)");
    bench->add_option("--threads", bench_threads, "row-parallel inference threads");

    // fetch
    auto* fetch = app.add_subcommand("fetch", "download and normalize a dataset");
    std::string fetch_name, fetch_url, fetch_sha;
    fetch->add_option("dataset", fetch_name, "cora|citeseer|pubmed|mr|r8|r52|ohsumed|20ng")->required();
    fetch->add_option("--url", fetch_url, "source URL override");
    fetch->add_option("--sha256", fetch_sha, "expected payload hash override");
    fetch->add_option("--data-dir", data_dir, "dataset directory (env TQ_DATA_DIR)");

    // smooth
    auto* smooth = app.add_subcommand("smooth", "Savitzky-Golay smoothing of a metrics series");
    std::string smooth_file, smooth_metric = "loss", smooth_split = "train";
    int smooth_window = 0, smooth_poly = 2;
    smooth->add_option("metrics", smooth_file, "metrics JSONL file")->required();
    smooth->add_option("--window", smooth_window, "odd window size")->required();
    smooth->add_option("--polyorder", smooth_poly, "polynomial order (< window)");
    smooth->add_option("--metric", smooth_metric, "metric name (default: loss)");
    smooth->add_option("--split", smooth_split, "split tag (default: train)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*train) return cmd_train(train_config, data_dir, train_out, train_seeds, train_jobs, train_fetch, train_save);
        if (*eval) return cmd_eval(eval_model, eval_tsv, eval_threads);
        if (*exp) return cmd_export(export_in, export_out);
        if (*infer) return cmd_infer(infer_model, infer_tsv, infer_threads);
        if (*bench) return cmd_bench(bench_model, bench_batch, bench_repeats, bench_threads);
        if (*fetch) return cmd_fetch(fetch_name, data_dir, fetch_url, fetch_sha);
        if (*smooth) {
            if (smooth_window < 1 || smooth_window % 2 == 0)
                throw tq::usage_error("smooth: --window must be an odd positive integer");
            if (smooth_poly >= smooth_window)
                throw tq::usage_error("smooth: --polyorder must be smaller than --window");
            return cmd_smooth(smooth_file, smooth_window, smooth_poly, smooth_metric, smooth_split);
        }
    } catch (const tq::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return int(e.kind);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
