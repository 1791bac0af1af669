#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "tq/nn.hpp"
#include "tq/tensor.hpp"
#include "tq/util.hpp"

namespace tq {

namespace fs = std::filesystem;

// ------------------------------------------------------------------ xor
struct XorDataset {
    std::vector<float> features;  // n x 4 row-major, entries in {0,1}
    std::vector<int> labels;      // feature[0] XOR feature[1]
    int n = 0;

    Tensor feature_tensor() const { return Tensor({n, 4}, features, false); }
};

// All four columns are fair coin flips; the label is recomputed from the
// first two, the last two are noise.
inline XorDataset gen_xor(int n, uint64_t seed) {
    if (n < 1) throw usage_error("gen_xor: n must be >= 1");
    Rng rng = Rng(seed).fork(0x784f52);
    XorDataset ds;
    ds.n = n;
    ds.features.resize(size_t(n) * 4);
    ds.labels.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        int a = int(rng.below(2)), b = int(rng.below(2));
        ds.features[size_t(i) * 4 + 0] = float(a);
        ds.features[size_t(i) * 4 + 1] = float(b);
        ds.features[size_t(i) * 4 + 2] = float(rng.below(2));
        ds.features[size_t(i) * 4 + 3] = float(rng.below(2));
        ds.labels[size_t(i)] = a ^ b;
    }
    return ds;
}

inline void save_xor_tsv(const XorDataset& ds, const std::string& path) {
    std::string out;
    for (int i = 0; i < ds.n; ++i) {
        for (int j = 0; j < 4; ++j) {
            out += ds.features[size_t(i) * 4 + size_t(j)] == 0.f ? "0" : "1";
            out += '\t';
        }
        out += std::to_string(ds.labels[size_t(i)]);
        out += '\n';
    }
    write_file(path, out);
}

inline XorDataset load_xor_tsv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open " + path);
    XorDataset ds;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto parts = split(line, '\t');
        if (parts.size() != 5)
            throw data_error(path + ":" + std::to_string(lineno) + ": expected 5 tab-separated fields");
        for (int j = 0; j < 4; ++j) ds.features.push_back(std::stof(parts[size_t(j)]));
        ds.labels.push_back(std::stoi(parts[4]));
        ++ds.n;
    }
    return ds;
}

// ------------------------------------------------------------------ bag of words
// On-disk corpus format: one document per line, "<train|test>\t<label>\t<text>".
struct BowDataset {
    std::string name;
    std::vector<std::string> vocab;              // index -> token; OOV bucket appended last
    std::unordered_map<std::string, int> index;  // token -> index (training vocabulary only)
    std::vector<std::string> class_names;        // sorted label names
    struct Doc {
        std::vector<std::pair<int, float>> counts;  // (token index, count), index-sorted
        int label = 0;
        int length = 0;  // total token count including OOV
    };
    std::vector<Doc> docs;
    std::vector<int> train_idx, test_idx;

    int vocab_with_oov() const { return int(vocab.size()) + 1; }
    int oov_index() const { return int(vocab.size()); }
    int classes() const { return int(class_names.size()); }
};

inline BowDataset load_bow(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open corpus: " + path);
    struct RawDoc {
        bool train;
        std::string label;
        std::vector<std::string> tokens;
    };
    std::vector<RawDoc> raw;
    std::string line;
    int lineno = 0;
    std::set<std::string> labels;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        size_t t1 = line.find('\t');
        size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        if (t2 == std::string::npos)
            throw data_error(path + ":" + std::to_string(lineno) + ": expected <split>\\t<label>\\t<text>");
        std::string tag = line.substr(0, t1);
        std::string label = line.substr(t1 + 1, t2 - t1 - 1);
        if (tag != "train" && tag != "test")
            throw data_error(path + ":" + std::to_string(lineno) + ": unknown split tag '" + tag + "'");
        labels.insert(label);
        raw.push_back({tag == "train", label, tokenize(line.substr(t2 + 1))});
    }
    if (raw.empty()) throw data_error(path + ": empty corpus");

    BowDataset ds;
    ds.name = fs::path(path).stem().string();
    ds.class_names.assign(labels.begin(), labels.end());
    std::map<std::string, int> label_idx;
    for (size_t i = 0; i < ds.class_names.size(); ++i) label_idx[ds.class_names[i]] = int(i);

    // vocabulary from the training split only, in order of first appearance
    for (const RawDoc& d : raw)
        if (d.train)
            for (const std::string& tok : d.tokens)
                if (!ds.index.count(tok)) {
                    ds.index[tok] = int(ds.vocab.size());
                    ds.vocab.push_back(tok);
                }

    int oov = ds.oov_index();
    for (const RawDoc& d : raw) {
        BowDataset::Doc doc;
        doc.label = label_idx[d.label];
        doc.length = int(d.tokens.size());
        std::map<int, float> counts;
        for (const std::string& tok : d.tokens) {
            auto it = ds.index.find(tok);
            counts[it == ds.index.end() ? oov : it->second] += 1.f;
        }
        doc.counts.assign(counts.begin(), counts.end());
        (d.train ? ds.train_idx : ds.test_idx).push_back(int(ds.docs.size()));
        ds.docs.push_back(std::move(doc));
    }
    return ds;
}

inline void save_bow(const BowDataset& ds, const std::string& path) {
    std::string out;
    auto dump = [&](int di, const char* tag) {
        const BowDataset::Doc& d = ds.docs[size_t(di)];
        out += tag;
        out += '\t';
        out += ds.class_names[size_t(d.label)];
        out += '\t';
        bool first = true;
        for (auto [tok, cnt] : d.counts) {
            std::string word = tok == ds.oov_index() ? "oovtoken" : ds.vocab[size_t(tok)];
            for (int c = 0; c < int(cnt); ++c) {
                if (!first) out += ' ';
                out += word;
                first = false;
            }
        }
        out += '\n';
    };
    for (int di : ds.train_idx) dump(di, "train");
    for (int di : ds.test_idx) dump(di, "test");
    write_file(path, out);
}

// Count rows normalized to sum 1 (mean pooling); empty documents stay zero.
inline SparsePtr bow_batch(const BowDataset& ds, const std::vector<int>& doc_ids) {
    std::vector<std::vector<std::pair<int, float>>> rows(doc_ids.size());
    for (size_t r = 0; r < doc_ids.size(); ++r) {
        const BowDataset::Doc& d = ds.docs[size_t(doc_ids[r])];
        float denom = d.length > 0 ? float(d.length) : 1.f;
        rows[r].reserve(d.counts.size());
        for (auto [tok, cnt] : d.counts) rows[r].push_back({tok, cnt / denom});
    }
    return std::make_shared<SparseMatrix>(
        SparseMatrix::from_rows(int(doc_ids.size()), ds.vocab_with_oov(), rows));
}

inline std::vector<int> bow_labels(const BowDataset& ds, const std::vector<int>& doc_ids) {
    std::vector<int> out(doc_ids.size());
    for (size_t i = 0; i < doc_ids.size(); ++i) out[i] = ds.docs[size_t(doc_ids[i])].label;
    return out;
}

// ------------------------------------------------------------------ citation graphs
// Normalized on-disk format (UTF-8, LF):
//   nodes.tsv  <id>\t<label>\t<idx:val idx:val ...>
//   edges.tsv  <src>\t<dst>
//   split.tsv  <id>\t<train|val|test>
//   meta.json  counts + sha256 of the three files + source provenance
struct CitationGraph {
    std::string name;
    int n = 0, f = 0, classes = 0;
    SparsePtr features;  // row-normalized to sum 1
    SparsePtr adj;       // D^-1/2 (A+I) D^-1/2
    std::vector<std::pair<int, int>> edges;
    std::vector<int> labels;
    std::vector<int> train_idx, val_idx, test_idx;
    std::map<std::string, std::string> checksums;
};

struct SplitSizes {
    int train = 0, val = 0, test = 0;
};

inline std::optional<SplitSizes> standard_split_sizes(const std::string& name) {
    if (name == "cora") return SplitSizes{140, 500, 1000};
    if (name == "citeseer") return SplitSizes{120, 500, 1000};
    if (name == "pubmed") return SplitSizes{60, 500, 1000};
    return std::nullopt;
}

struct GraphFiles {
    int n = 0, f = 0, classes = 0;
    std::vector<std::vector<std::pair<int, float>>> feat_rows;  // raw (unnormalized) features
    std::vector<int> labels;
    std::vector<std::pair<int, int>> edges;
    std::vector<int> train_idx, val_idx, test_idx;
};

inline void save_citation(const GraphFiles& g, const std::string& name, const std::string& dir,
                          const std::string& provenance = "") {
    fs::create_directories(dir);
    std::string nodes;
    for (int i = 0; i < g.n; ++i) {
        nodes += std::to_string(i);
        nodes += '\t';
        nodes += std::to_string(g.labels[size_t(i)]);
        nodes += '\t';
        bool first = true;
        for (auto [j, v] : g.feat_rows[size_t(i)]) {
            if (!first) nodes += ' ';
            char buf[48];
            std::snprintf(buf, sizeof(buf), "%d:%.9g", j, double(v));
            nodes += buf;
            first = false;
        }
        nodes += '\n';
    }
    std::string edges;
    for (auto [a, b] : g.edges) {
        edges += std::to_string(a);
        edges += '\t';
        edges += std::to_string(b);
        edges += '\n';
    }
    std::string splits;
    for (int i : g.train_idx) splits += std::to_string(i) + "\ttrain\n";
    for (int i : g.val_idx) splits += std::to_string(i) + "\tval\n";
    for (int i : g.test_idx) splits += std::to_string(i) + "\ttest\n";

    write_file(dir + "/nodes.tsv", nodes);
    write_file(dir + "/edges.tsv", edges);
    write_file(dir + "/split.tsv", splits);

    nlohmann::json meta = {
        {"name", name},
        {"nodes", g.n},
        {"features", g.f},
        {"classes", g.classes},
        {"edges", int64_t(g.edges.size())},
        {"provenance", provenance},
        {"hashes",
         {{"nodes.tsv", sha256_hex(nodes)}, {"edges.tsv", sha256_hex(edges)}, {"split.tsv", sha256_hex(splits)}}}};
    write_file(dir + "/meta.json", meta.dump(2) + "\n");
}

inline CitationGraph load_citation(const std::string& dir, const std::string& name) {
    std::string meta_path = dir + "/meta.json";
    if (!fs::exists(meta_path))
        throw data_error("dataset '" + name + "' not found in " + dir + " (hint: run `tq fetch " + name + "`)");
    nlohmann::json meta = nlohmann::json::parse(read_file(meta_path));

    CitationGraph g;
    g.name = name;
    g.n = meta.at("nodes").get<int>();
    g.f = meta.at("features").get<int>();
    g.classes = meta.at("classes").get<int>();

    for (const char* fname : {"nodes.tsv", "edges.tsv", "split.tsv"}) {
        std::string body = read_file(dir + "/" + fname);
        std::string want = meta.at("hashes").at(fname).get<std::string>();
        std::string got = sha256_hex(body);
        if (got != want)
            throw integrity_error(std::string(fname) + ": checksum mismatch (expected " + want + ", got " + got + ")");
        g.checksums[fname] = got;
    }

    // nodes
    std::vector<std::vector<std::pair<int, float>>> rows(static_cast<size_t>(g.n));
    g.labels.assign(static_cast<size_t>(g.n), -1);
    {
        std::ifstream in(dir + "/nodes.tsv");
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            auto parts = split(line, '\t');
            if (parts.size() != 3)
                throw data_error("nodes.tsv:" + std::to_string(lineno) + ": expected 3 fields");
            int id = std::stoi(parts[0]);
            if (id < 0 || id >= g.n) throw data_error("nodes.tsv:" + std::to_string(lineno) + ": id out of range");
            g.labels[size_t(id)] = std::stoi(parts[1]);
            if (!parts[2].empty())
                for (const std::string& pair : split(parts[2], ' ')) {
                    if (pair.empty()) continue;
                    size_t colon = pair.find(':');
                    if (colon == std::string::npos)
                        throw data_error("nodes.tsv:" + std::to_string(lineno) + ": bad feature pair '" + pair + "'");
                    int j = std::stoi(pair.substr(0, colon));
                    float v = std::stof(pair.substr(colon + 1));
                    if (j < 0 || j >= g.f)
                        throw data_error("nodes.tsv:" + std::to_string(lineno) + ": feature index out of range");
                    rows[size_t(id)].push_back({j, v});
                }
        }
    }
    for (int i = 0; i < g.n; ++i)
        if (g.labels[size_t(i)] < 0 || g.labels[size_t(i)] >= g.classes)
            throw data_error("nodes.tsv: node " + std::to_string(i) + " missing or bad label");

    // row-normalize features to sum 1
    for (auto& row : rows) {
        double s = 0;
        for (auto& [j, v] : row) s += v;
        if (s != 0)
            for (auto& [j, v] : row) v = float(double(v) / s);
    }
    g.features = std::make_shared<SparseMatrix>(SparseMatrix::from_rows(g.n, g.f, rows));

    // edges
    {
        std::ifstream in(dir + "/edges.tsv");
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            auto parts = split(line, '\t');
            if (parts.size() != 2) throw data_error("edges.tsv:" + std::to_string(lineno) + ": expected 2 fields");
            int a = std::stoi(parts[0]), b = std::stoi(parts[1]);
            if (a < 0 || a >= g.n || b < 0 || b >= g.n)
                throw data_error("edges.tsv:" + std::to_string(lineno) + ": dangling edge endpoint");
            g.edges.push_back({a, b});
        }
    }
    g.adj = normalize_adjacency(g.edges, g.n);

    // split
    {
        std::ifstream in(dir + "/split.tsv");
        std::string line;
        int lineno = 0;
        std::vector<char> seen(static_cast<size_t>(g.n), 0);
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            auto parts = split(line, '\t');
            if (parts.size() != 2) throw data_error("split.tsv:" + std::to_string(lineno) + ": expected 2 fields");
            int id = std::stoi(parts[0]);
            if (id < 0 || id >= g.n) throw data_error("split.tsv:" + std::to_string(lineno) + ": id out of range");
            if (seen[size_t(id)]) throw data_error("split.tsv:" + std::to_string(lineno) + ": duplicate id");
            seen[size_t(id)] = 1;
            if (parts[1] == "train")
                g.train_idx.push_back(id);
            else if (parts[1] == "val")
                g.val_idx.push_back(id);
            else if (parts[1] == "test")
                g.test_idx.push_back(id);
            else
                throw data_error("split.tsv:" + std::to_string(lineno) + ": unknown tag '" + parts[1] + "'");
        }
    }

    if (auto want = standard_split_sizes(name)) {
        if (int(g.train_idx.size()) != want->train || int(g.val_idx.size()) != want->val ||
            int(g.test_idx.size()) != want->test)
            throw data_error(name + ": split sizes " + std::to_string(g.train_idx.size()) + "/" +
                             std::to_string(g.val_idx.size()) + "/" + std::to_string(g.test_idx.size()) +
                             " do not match the standard " + std::to_string(want->train) + "/" +
                             std::to_string(want->val) + "/" + std::to_string(want->test));
        std::map<int, int> per_class;
        for (int i : g.train_idx) per_class[g.labels[size_t(i)]]++;
        for (auto [cls, cnt] : per_class)
            if (cnt != want->train / g.classes)
                throw data_error(name + ": train split has " + std::to_string(cnt) + " nodes for class " +
                                 std::to_string(cls) + ", expected " + std::to_string(want->train / g.classes));
    }
    return g;
}

// Deterministic standard-size split: per_class labeled nodes per class for
// training, then val_n and test_n drawn from the shuffled remainder.
inline void build_standard_split(GraphFiles& g, int per_class, int val_n, int test_n, uint64_t seed) {
    Rng rng = Rng(seed).fork(0x59117);
    std::vector<int> order(static_cast<size_t>(g.n));
    for (int i = 0; i < g.n; ++i) order[size_t(i)] = i;
    rng.shuffle(order);

    g.train_idx.clear();
    g.val_idx.clear();
    g.test_idx.clear();
    std::vector<int> taken(static_cast<size_t>(g.n), 0);
    std::vector<int> per_class_count(static_cast<size_t>(g.classes), 0);
    for (int i : order) {
        int cls = g.labels[size_t(i)];
        if (per_class_count[size_t(cls)] < per_class) {
            per_class_count[size_t(cls)]++;
            g.train_idx.push_back(i);
            taken[size_t(i)] = 1;
        }
    }
    if (int(g.train_idx.size()) != per_class * g.classes)
        throw data_error("split: not enough nodes to take " + std::to_string(per_class) + " per class");
    for (int i : order) {
        if (taken[size_t(i)]) continue;
        if (int(g.val_idx.size()) < val_n) {
            g.val_idx.push_back(i);
            taken[size_t(i)] = 1;
        } else if (int(g.test_idx.size()) < test_n) {
            g.test_idx.push_back(i);
            taken[size_t(i)] = 1;
        }
    }
    if (int(g.val_idx.size()) != val_n || int(g.test_idx.size()) != test_n)
        throw data_error("split: graph too small for requested val/test sizes");
    std::sort(g.train_idx.begin(), g.train_idx.end());
    std::sort(g.val_idx.begin(), g.val_idx.end());
    std::sort(g.test_idx.begin(), g.test_idx.end());
}

// ------------------------------------------------------------------ sequence data
struct SeqSample {
    std::vector<int> tokens;        // original sequence
    std::vector<int> masked_input;  // tokens with mask_id at masked positions
    std::vector<int> mask_pos;      // masked position list, ascending
};

struct SeqDataset {
    int vocab = 0;  // data tokens are 0..vocab-1
    int len = 0;
    int mask_id = 0;  // == vocab
    int bos_id = 0;   // == vocab + 1
    std::vector<SeqSample> samples;
    int model_vocab() const { return vocab + 2; }
};

// Sequences from a seeded first-order Markov chain with peaked transitions;
// ceil(mask_prob * len) positions are masked per sample. The transition table
// derives from chain_seed (default: seed), so train/validation splits can
// share one distribution while drawing disjoint samples.
inline SeqDataset gen_seq_copytask(int n, int len, int vocab, double mask_prob, uint64_t seed,
                                   uint64_t chain_seed = UINT64_MAX) {
    if (mask_prob <= 0.0 || mask_prob >= 1.0) throw usage_error("copytask: mask_prob must be in (0,1)");
    if (vocab < 2 || len < 1 || n < 1) throw usage_error("copytask: bad dimensions");
    if (chain_seed == UINT64_MAX) chain_seed = seed;
    SeqDataset ds;
    ds.vocab = vocab;
    ds.len = len;
    ds.mask_id = vocab;
    ds.bos_id = vocab + 1;

    Rng chain_rng = Rng(chain_seed).fork(0xC0B1);
    // peaked transition table: softmax of 2 * normal logits per row
    std::vector<std::vector<double>> cdf(static_cast<size_t>(vocab), std::vector<double>(static_cast<size_t>(vocab)));
    for (int s = 0; s < vocab; ++s) {
        std::vector<double> p(static_cast<size_t>(vocab));
        double mx = -1e30;
        for (int t = 0; t < vocab; ++t) {
            p[size_t(t)] = 2.0 * chain_rng.normal(0, 1);
            mx = std::max(mx, p[size_t(t)]);
        }
        double sum = 0;
        for (double& v : p) {
            v = std::exp(v - mx);
            sum += v;
        }
        double acc = 0;
        for (int t = 0; t < vocab; ++t) {
            acc += p[size_t(t)] / sum;
            cdf[size_t(s)][size_t(t)] = acc;
        }
    }
    auto draw = [&](Rng& r, int state) {
        double u = r.uniform01();
        const std::vector<double>& row = cdf[size_t(state)];
        for (int t = 0; t < vocab; ++t)
            if (u <= row[size_t(t)]) return t;
        return vocab - 1;
    };

    Rng samp_rng = Rng(seed).fork(0x5A3);
    int n_mask = int(std::ceil(mask_prob * double(len)));
    for (int i = 0; i < n; ++i) {
        SeqSample s;
        s.tokens.resize(static_cast<size_t>(len));
        int state = int(samp_rng.below(uint64_t(vocab)));
        for (int t = 0; t < len; ++t) {
            s.tokens[size_t(t)] = state;
            state = draw(samp_rng, state);
        }
        std::vector<int> pos(static_cast<size_t>(len));
        for (int t = 0; t < len; ++t) pos[size_t(t)] = t;
        samp_rng.shuffle(pos);
        pos.resize(size_t(n_mask));
        std::sort(pos.begin(), pos.end());
        s.mask_pos = pos;
        s.masked_input = s.tokens;
        for (int p : pos) s.masked_input[size_t(p)] = ds.mask_id;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// ------------------------------------------------------------------ tsv features
// Plain numeric TSV; optional trailing integer label column.
struct TsvData {
    int n = 0, f = 0;
    std::vector<float> features;
    std::vector<int> labels;  // empty when the file has no label column
};

inline TsvData load_tsv_features(const std::string& path, bool with_labels) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open " + path);
    TsvData d;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto parts = split(line, '\t');
        int want = with_labels ? int(parts.size()) - 1 : int(parts.size());
        if (want < 1) throw data_error(path + ":" + std::to_string(lineno) + ": no feature columns");
        if (d.f == 0) d.f = want;
        if (want != d.f)
            throw data_error(path + ":" + std::to_string(lineno) + ": inconsistent column count");
        try {
            for (int j = 0; j < d.f; ++j) d.features.push_back(std::stof(parts[size_t(j)]));
            if (with_labels) d.labels.push_back(std::stoi(parts.back()));
        } catch (const std::exception&) {
            throw data_error(path + ":" + std::to_string(lineno) + ": malformed number");
        }
        ++d.n;
    }
    return d;
}

}  // namespace tq
