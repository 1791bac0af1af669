#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "tq/archive.hpp"
#include "tq/data.hpp"
#include "tq/error.hpp"
#include "tq/util.hpp"

namespace tq {

// One upstream payload. An empty sha256 means the pin is recorded into
// meta.json on first successful fetch and verified from there on.
struct FetchSource {
    std::string filename;
    std::string url;
    std::string sha256;
};

struct DatasetDef {
    std::string name;
    std::vector<FetchSource> sources;
    // raw payload bytes (one per source) -> normalized files under out_dir
    std::function<void(const std::vector<std::string>&, const std::string&, const std::string&)> convert;
};

// -------------------------------------------------------------- converters
// LINQS .content/.cites distributions (cora, citeseer): string node ids,
// tab-separated binary features, class label last.
inline GraphFiles convert_linqs_content(const std::string& content, const std::string& cites) {
    GraphFiles g;
    std::map<std::string, int> id_of;
    std::map<std::string, int> label_of;
    std::vector<std::string> label_names;
    std::vector<std::string> node_labels;

    for (const std::string& line : split(content, '\n')) {
        if (line.empty()) continue;
        auto parts = split(line, '\t');
        if (parts.size() < 3) throw data_error("linqs content: short line");
        const std::string& id = parts.front();
        const std::string& label = parts.back();
        if (id_of.count(id)) throw data_error("linqs content: duplicate node id " + id);
        id_of[id] = g.n++;
        node_labels.push_back(label);
        std::vector<std::pair<int, float>> row;
        for (size_t j = 1; j + 1 < parts.size(); ++j) {
            float v = std::stof(parts[j]);
            if (v != 0.f) row.push_back({int(j - 1), v});
        }
        g.f = int(parts.size()) - 2;
        g.feat_rows.push_back(std::move(row));
    }
    for (const std::string& l : node_labels)
        if (!label_of.count(l)) {
            label_of[l] = 0;
            label_names.push_back(l);
        }
    std::sort(label_names.begin(), label_names.end());
    for (size_t i = 0; i < label_names.size(); ++i) label_of[label_names[i]] = int(i);
    g.classes = int(label_names.size());
    for (const std::string& l : node_labels) g.labels.push_back(label_of[l]);

    for (const std::string& line : split(cites, '\n')) {
        if (line.empty()) continue;
        auto parts = split(line, '\t');
        if (parts.size() != 2) throw data_error("linqs cites: expected 2 fields");
        auto a = id_of.find(parts[0]), b = id_of.find(parts[1]);
        // LINQS citeseer lists a handful of edges to papers without content
        // rows; they are dropped, matching common preprocessing.
        if (a == id_of.end() || b == id_of.end()) continue;
        if (a->second == b->second) continue;
        g.edges.push_back({a->second, b->second});
    }
    return g;
}

inline void convert_linqs_tgz(const std::vector<std::string>& payloads, const std::string& name,
                              const std::string& out_dir, const std::string& provenance) {
    std::vector<TarEntry> entries = tar_extract(gzip_decompress(payloads.at(0)));
    std::string content, cites;
    for (const TarEntry& e : entries) {
        if (e.name.ends_with(".content")) content = e.bytes;
        if (e.name.ends_with(".cites")) cites = e.bytes;
    }
    if (content.empty() || cites.empty())
        throw data_error(name + ": archive lacks .content/.cites members");
    GraphFiles g = convert_linqs_content(content, cites);
    auto sizes = standard_split_sizes(name);
    if (!sizes) throw data_error(name + ": no standard split sizes known");
    build_standard_split(g, sizes->train / g.classes, sizes->val, sizes->test, 0x5EED0000 + uint64_t(g.n));
    save_citation(g, name, out_dir, provenance);
}

// Pubmed-Diabetes .tab files: sparse w-<term>=<tfidf> features, label=<k>.
inline void convert_pubmed_tabs(const std::vector<std::string>& payloads, const std::string& out_dir,
                                const std::string& provenance) {
    std::vector<TarEntry> entries = tar_extract(gzip_decompress(payloads.at(0)));
    std::string nodes_tab, cites_tab;
    for (const TarEntry& e : entries) {
        if (e.name.ends_with("NODE.paper.tab")) nodes_tab = e.bytes;
        if (e.name.ends_with("DIRECTED.cites.tab")) cites_tab = e.bytes;
    }
    if (nodes_tab.empty() || cites_tab.empty()) throw data_error("pubmed: archive lacks .tab members");

    GraphFiles g;
    std::map<std::string, int> id_of;
    std::map<std::string, int> feat_of;
    auto lines = split(nodes_tab, '\n');
    // line 0: comment/header; line 1: schema listing features
    for (size_t li = 2; li < lines.size(); ++li) {
        const std::string& line = lines[li];
        if (line.empty()) continue;
        auto parts = split(line, '\t');
        if (parts.size() < 2) continue;
        id_of[parts[0]] = g.n++;
        int label = -1;
        std::vector<std::pair<int, float>> row;
        for (size_t j = 1; j < parts.size(); ++j) {
            const std::string& tok = parts[j];
            size_t eq = tok.find('=');
            if (eq == std::string::npos) continue;
            std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
            if (key == "label") {
                label = std::stoi(val) - 1;  // labels are 1-based upstream
            } else if (key.rfind("w-", 0) == 0) {
                auto it = feat_of.find(key);
                int fi = it == feat_of.end() ? (feat_of[key] = int(feat_of.size())) : it->second;
                row.push_back({fi, std::stof(val)});
            }
        }
        if (label < 0) throw data_error("pubmed: node without label");
        g.labels.push_back(label);
        std::sort(row.begin(), row.end());
        g.feat_rows.push_back(std::move(row));
    }
    g.f = int(feat_of.size());
    g.classes = 3;
    for (const std::string& line : split(cites_tab, '\n')) {
        if (line.empty() || line[0] == '#') continue;
        auto parts = split(line, '\t');
        // format: <edge id>\tpaper:<id>\t|\tpaper:<id>
        if (parts.size() < 4) continue;
        auto strip = [](const std::string& s) {
            size_t colon = s.find(':');
            return colon == std::string::npos ? s : s.substr(colon + 1);
        };
        auto a = id_of.find(strip(parts[1])), b = id_of.find(strip(parts[3]));
        if (a == id_of.end() || b == id_of.end()) continue;
        if (a->second == b->second) continue;
        g.edges.push_back({a->second, b->second});
    }
    auto sizes = *standard_split_sizes("pubmed");
    build_standard_split(g, sizes.train / g.classes, sizes.val, sizes.test, 0x5EED0000 + uint64_t(g.n));
    save_citation(g, "pubmed", out_dir, provenance);
}

// text_gcn-style corpus pair: meta lines "<docid>\t<train|test>\t<label>" and
// one raw text line per document in the same order.
inline void convert_text_corpus(const std::vector<std::string>& payloads, const std::string& name,
                                const std::string& out_dir) {
    auto meta_lines = split(payloads.at(0), '\n');
    auto text_lines = split(payloads.at(1), '\n');
    while (!meta_lines.empty() && meta_lines.back().empty()) meta_lines.pop_back();
    while (!text_lines.empty() && text_lines.back().empty()) text_lines.pop_back();
    if (meta_lines.size() != text_lines.size())
        throw data_error(name + ": meta has " + std::to_string(meta_lines.size()) + " lines but corpus has " +
                         std::to_string(text_lines.size()));
    std::string out;
    for (size_t i = 0; i < meta_lines.size(); ++i) {
        auto parts = split(meta_lines[i], '\t');
        if (parts.size() != 3) throw data_error(name + ": bad meta line " + std::to_string(i + 1));
        std::string tag = parts[1].find("test") != std::string::npos ? "test" : "train";
        out += tag;
        out += '\t';
        out += parts[2];
        out += '\t';
        out += text_lines[i];
        out += '\n';
    }
    fs::create_directories(out_dir);
    write_file(out_dir + "/" + name + ".corpus.tsv", out);
    nlohmann::json meta = {{"name", name},
                           {"documents", meta_lines.size()},
                           {"hashes", {{name + ".corpus.tsv", sha256_hex(out)}}}};
    write_file(out_dir + "/meta.json", meta.dump(2) + "\n");
}

// -------------------------------------------------------------- registry
inline std::map<std::string, DatasetDef> dataset_registry() {
    std::map<std::string, DatasetDef> reg;
    auto linqs = [](const std::string& name, const std::string& url) {
        DatasetDef d;
        d.name = name;
        d.sources = {{name + ".tgz", url, ""}};
        d.convert = [name, url](const std::vector<std::string>& p, const std::string& out,
                                const std::string& prov) { convert_linqs_tgz(p, name, out, prov); };
        return d;
    };
    reg["cora"] = linqs("cora", "https://linqs-data.soe.ucsc.edu/public/lbc/cora.tgz");
    reg["citeseer"] = linqs("citeseer", "https://linqs-data.soe.ucsc.edu/public/lbc/citeseer.tgz");
    {
        DatasetDef d;
        d.name = "pubmed";
        d.sources = {{"Pubmed-Diabetes.tgz", "https://linqs-data.soe.ucsc.edu/public/Pubmed-Diabetes.tgz", ""}};
        d.convert = [](const std::vector<std::string>& p, const std::string& out, const std::string& prov) {
            convert_pubmed_tabs(p, out, prov);
        };
        reg["pubmed"] = d;
    }
    auto textgcn = [](const std::string& name, const std::string& stem) {
        DatasetDef d;
        d.name = name;
        std::string base = "https://raw.githubusercontent.com/yao8839836/text_gcn/master/data/";
        d.sources = {{name + ".meta.txt", base + stem + ".txt", ""},
                     {name + ".texts.txt", base + "corpus/" + stem + ".clean.txt", ""}};
        d.convert = [name](const std::vector<std::string>& p, const std::string& out, const std::string&) {
            convert_text_corpus(p, name, out);
        };
        return d;
    };
    reg["mr"] = textgcn("mr", "mr");
    reg["r8"] = textgcn("r8", "R8");
    reg["r52"] = textgcn("r52", "R52");
    reg["ohsumed"] = textgcn("ohsumed", "ohsumed");
    reg["20ng"] = textgcn("20ng", "20ng");
    return reg;
}

// -------------------------------------------------------------- http
// GET with redirects; https available when built with OpenSSL support.
inline std::string http_get(const std::string& url) {
    size_t scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw usage_error("fetch: bad url " + url);
    std::string scheme = url.substr(0, scheme_end);
    size_t host_start = scheme_end + 3;
    size_t path_start = url.find('/', host_start);
    std::string host = url.substr(host_start, path_start == std::string::npos ? std::string::npos
                                                                              : path_start - host_start);
    std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);
    std::string origin = scheme + "://" + host;

    httplib::Client cli(origin);
    cli.set_follow_location(true);
    cli.set_connection_timeout(20);
    cli.set_read_timeout(120);
    auto res = cli.Get(path);
    if (!res)
        throw data_error("fetch: network failure for " + url + " (" + httplib::to_string(res.error()) +
                         "); retry when the network is available");
    if (res->status != 200)
        throw data_error("fetch: HTTP " + std::to_string(res->status) + " for " + url);
    return res->body;
}

struct FetchResult {
    bool already_present = false;
    std::string dir;
    std::vector<std::string> source_hashes;
};

// Scope lock via exclusive lockfile creation; serializes fetches per dataset.
struct DirLock {
    std::string path;
    explicit DirLock(const std::string& p) : path(p) {
        for (int attempt = 0;; ++attempt) {
            std::ofstream f(path, std::ios::out | std::ios::app);
            f.close();
            // try to take it by creating the .owner marker exclusively
            FILE* fp = std::fopen((path + ".owner").c_str(), "wx");
            if (fp) {
                std::fclose(fp);
                return;
            }
            if (attempt > 600) throw data_error("fetch: lock busy: " + path);
            std::this_thread::sleep_for(std::chrono::milliseconds(100));
        }
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path + ".owner", ec);
        fs::remove(path, ec);
    }
};

// Download + verify + convert. Idempotent: converted outputs that verify
// against meta.json short-circuit; raw payloads that verify are not re-fetched.
inline FetchResult fetch_dataset(const std::string& name, const std::string& data_dir,
                                 const std::string& url_override = "",
                                 const std::string& sha_override = "",
                                 const std::function<std::string(const std::string&)>& get = {}) {
    auto reg = dataset_registry();
    auto it = reg.find(name);
    if (it == reg.end()) {
        std::string known;
        for (auto& [k, v] : reg) known += (known.empty() ? "" : ", ") + k;
        throw usage_error("fetch: unknown dataset '" + name + "' (known: " + known + ")");
    }
    DatasetDef def = it->second;
    if (!url_override.empty()) {
        if (def.sources.size() == 1)
            def.sources[0].url = url_override;
        else
            throw usage_error("fetch: --url override requires a single-source dataset");
    }
    if (!sha_override.empty()) def.sources[0].sha256 = sha_override;

    std::string out_dir = data_dir + "/" + name;
    std::string raw_dir = data_dir + "/raw/" + name;
    fs::create_directories(data_dir);
    DirLock lock(data_dir + "/" + name + ".lock");

    FetchResult res;
    res.dir = out_dir;

    // Converted outputs present and intact -> no-op.
    if (fs::exists(out_dir + "/meta.json")) {
        try {
            nlohmann::json meta = nlohmann::json::parse(read_file(out_dir + "/meta.json"));
            bool ok = true;
            for (auto& [fname, want] : meta.at("hashes").items())
                if (sha256_file(out_dir + "/" + fname) != want.get<std::string>()) ok = false;
            if (ok) {
                res.already_present = true;
                return res;
            }
        } catch (const std::exception&) {
            // fall through to re-fetch
        }
    }

    fs::create_directories(raw_dir);
    std::vector<std::string> payloads;
    std::string provenance;
    for (FetchSource& src : def.sources) {
        std::string path = raw_dir + "/" + src.filename;
        std::string body;
        bool have = false;
        if (fs::exists(path)) {
            body = read_file(path);
            if (src.sha256.empty() || sha256_hex(body) == src.sha256) have = true;
        }
        if (!have) {
            body = get ? get(src.url) : http_get(src.url);
            std::string got = sha256_hex(body);
            if (!src.sha256.empty() && got != src.sha256) {
                std::error_code ec;
                fs::remove(path, ec);
                fs::remove(path + ".part", ec);
                throw integrity_error("fetch " + name + ": sha256 mismatch for " + src.url + " (expected " +
                                      src.sha256 + ", got " + got + ")");
            }
            write_file(path + ".part", body);
            fs::rename(path + ".part", path);
        }
        res.source_hashes.push_back(sha256_hex(body));
        provenance += src.url + " sha256:" + res.source_hashes.back() + "; ";
        payloads.push_back(std::move(body));
    }

    try {
        def.convert(payloads, out_dir, provenance);
    } catch (const std::exception&) {
        std::error_code ec;
        fs::remove_all(out_dir, ec);  // no partial normalized state
        throw;
    }
    return res;
}

}  // namespace tq
