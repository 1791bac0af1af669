#pragma once

#include <atomic>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "tq/checkpoint.hpp"
#include "tq/data.hpp"
#include "tq/fetch.hpp"
#include "tq/metrics.hpp"
#include "tq/ternary.hpp"
#include "tq/train.hpp"

namespace tq {

// Declarative description of one experiment: model, dataset, hyperparameters
// and the seed sweep. Parsed from a JSON config (comments allowed).
struct ExperimentSpec {
    std::string name;
    ModelSpec model;
    nlohmann::json dataset;  // {"name": ..., per-dataset knobs}
    Hyper hyper;             // seed field unused; seeds below drive the sweep
    std::vector<uint64_t> seeds;
    std::string out_dir;
    bool save_model = false;
    int sgc_hops = 2;
};

inline ExperimentSpec parse_experiment(const nlohmann::json& j) {
    ExperimentSpec e;
    if (!j.contains("name")) throw usage_error("config: missing field 'name'");
    e.name = j.at("name").get<std::string>();
    if (!j.contains("model")) throw usage_error("config: missing field 'model'");
    e.model = spec_from_json(j.at("model"));
    if (!j.contains("dataset") || !j.at("dataset").contains("name"))
        throw usage_error("config: missing field 'dataset.name'");
    e.dataset = j.at("dataset");
    if (j.contains("hyper")) {
        const auto& h = j.at("hyper");
        e.hyper.lr = h.value("lr", 0.01f);
        e.hyper.epochs = h.value("epochs", 100);
        e.hyper.batch_size = h.value("batch_size", 0);
        e.hyper.weight_decay = h.value("weight_decay", 0.f);
        e.hyper.adamw = h.value("adamw", false);
    }
    if (e.hyper.epochs < 1) throw usage_error("config: hyper.epochs must be >= 1");
    if (!j.contains("seeds") || !j.at("seeds").is_array() || j.at("seeds").empty())
        throw usage_error("config: missing or empty field 'seeds'");
    for (const auto& s : j.at("seeds")) e.seeds.push_back(s.get<uint64_t>());
    e.out_dir = j.value("out_dir", "runs/" + e.name);
    e.save_model = j.value("save_model", false);
    e.sgc_hops = j.value("sgc_hops", 2);
    return e;
}

inline ExperimentSpec load_experiment(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw usage_error("cannot open config: " + path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
    return parse_experiment(j);
}

// Resolved dataset bundle; at most one member is populated.
struct ResolvedData {
    std::optional<BowDataset> bow;
    std::optional<CitationGraph> graph;
    // copytask parameters are regenerated per run from the config
};

inline std::string dataset_name(const ExperimentSpec& e) { return e.dataset.at("name").get<std::string>(); }

inline ResolvedData resolve_dataset(const ExperimentSpec& e, const std::string& data_dir, bool allow_fetch) {
    ResolvedData r;
    std::string name = dataset_name(e);
    if (e.model.arch == Arch::wide_mlp) {
        std::string path = data_dir + "/" + name + "/" + name + ".corpus.tsv";
        if (!fs::exists(path)) {
            if (allow_fetch)
                fetch_dataset(name, data_dir);
            else
                throw data_error("dataset '" + name + "' not found at " + path + " (hint: run `tq fetch " +
                                 name + "` or pass --fetch)");
        }
        r.bow = load_bow(path);
    } else if (e.model.arch == Arch::gcn || e.model.arch == Arch::sgc) {
        std::string dir = data_dir + "/" + name;
        if (!fs::exists(dir + "/meta.json") && allow_fetch) fetch_dataset(name, data_dir);
        r.graph = load_citation(dir, name);
    }
    return r;
}

struct RunResult {
    std::vector<std::string> metrics_files;
    std::string summary_file;
    nlohmann::json summary;
};

// Executes the seed sweep with a small worker pool, one metrics file per run,
// then builds the summary strictly from the files it wrote.
inline RunResult run_experiment(const ExperimentSpec& e, const std::string& data_dir, int jobs = 2,
                                bool allow_fetch = false) {
    e.model.validate();
    fs::create_directories(e.out_dir);
    ResolvedData data = resolve_dataset(e, data_dir, allow_fetch);

    std::vector<std::string> files(e.seeds.size());
    std::vector<std::exception_ptr> errors(e.seeds.size());
    std::atomic<size_t> next{0};

    auto run_one = [&](size_t idx) {
        uint64_t seed = e.seeds[idx];
        std::string path = e.out_dir + "/" + e.name + ".seed" + std::to_string(seed) + ".metrics.jsonl";
        JsonlWriter writer(path);
        MetricSink sink = [&writer](const MetricsRecord& rec) { writer.write(rec); };
        Hyper hy = e.hyper;
        hy.seed = seed;

        std::optional<Model> trained;
        ModelDims dims;
        switch (e.model.arch) {
            case Arch::xor_net: {
                int n_train = e.dataset.value("n_train", 5000);
                int n_test = e.dataset.value("n_test", 1000);
                uint64_t test_seed = e.dataset.value("test_seed", uint64_t(994242));
                XorDataset tr = gen_xor(n_train, seed);
                XorDataset te = gen_xor(n_test, test_seed);
                dims = ModelDims{4, 2, 0};
                trained = Model(train_xor(e.model, tr, te, hy, e.name, sink));
                break;
            }
            case Arch::wide_mlp: {
                dims = ModelDims{0, data.bow->classes(), data.bow->vocab_with_oov()};
                trained = Model(train_bow(e.model, *data.bow, hy, e.name, sink));
                break;
            }
            case Arch::gcn: {
                dims = ModelDims{data.graph->f, data.graph->classes, 0};
                trained = Model(train_gcn(e.model, *data.graph, hy, e.name, sink));
                break;
            }
            case Arch::sgc: {
                dims = ModelDims{data.graph->f, data.graph->classes, 0};
                trained = Model(train_sgc(e.model, *data.graph, hy, e.name, sink, e.sgc_hops));
                break;
            }
            case Arch::tiny_encoder:
            case Arch::tiny_encdec: {
                int n_train = e.dataset.value("n_train", 256);
                int n_val = e.dataset.value("n_val", 64);
                int vocab = e.dataset.value("vocab", 24);
                double mask_prob = e.dataset.value("mask_prob", 0.15);
                uint64_t dseed = e.dataset.value("data_seed", uint64_t(7));
                SeqDataset tr = gen_seq_copytask(n_train, e.model.seq_len, vocab, mask_prob, dseed, dseed);
                SeqDataset va;  // same chain, disjoint sample stream
                if (n_val > 0) va = gen_seq_copytask(n_val, e.model.seq_len, vocab, mask_prob, dseed + 1, dseed);
                dims = ModelDims{0, 0, tr.model_vocab()};
                if (e.model.arch == Arch::tiny_encoder)
                    trained = Model(train_encoder(e.model, tr, va, hy, e.name, sink));
                else
                    trained = Model(train_encdec(e.model, tr, va, hy, e.name, sink));
                break;
            }
        }
        files[idx] = path;

        if (e.save_model && trained) {
            std::string base = e.out_dir + "/" + e.name + ".seed" + std::to_string(seed);
            save_checkpoint(*trained, e.model, dims, base + ".tqcp");
            try {
                save_model_file(export_model(*trained), base + ".tq58");
            } catch (const Error&) {
                // not every architecture is exportable; the checkpoint remains
            }
        }
    };

    int workers = std::max(1, std::min<int>(jobs, int(e.seeds.size())));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                size_t idx = next.fetch_add(1);
                if (idx >= e.seeds.size()) return;
                try {
                    run_one(idx);
                } catch (...) {
                    errors[idx] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& err : errors)
        if (err) std::rethrow_exception(err);

    // summary is recomputed from the per-run files only
    RunResult res;
    res.metrics_files = files;
    nlohmann::json summary = {{"name", e.name}, {"seeds", e.seeds}, {"metrics", nlohmann::json::object()}};
    std::vector<std::pair<std::string, std::string>> keys;
    {
        std::set<std::pair<std::string, std::string>> seen;
        for (const MetricsRecord& r : read_jsonl(files[0])) seen.insert({r.split, r.metric});
        keys.assign(seen.begin(), seen.end());
    }
    for (auto& [split, metric] : keys) {
        MetricSummary s = summarize_final(files, split, metric);
        nlohmann::json js = {{"n", s.n}, {"mean", s.mean}, {"per_seed", s.per_seed}};
        if (s.ci95) js["ci95"] = *s.ci95;
        summary["metrics"][split + "/" + metric] = js;
    }
    res.summary = summary;
    res.summary_file = e.out_dir + "/" + e.name + ".summary.json";
    write_file(res.summary_file, summary.dump(2) + "\n");
    return res;
}

}  // namespace tq
