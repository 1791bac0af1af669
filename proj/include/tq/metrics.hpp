#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tq/error.hpp"
#include "tq/util.hpp"

namespace tq {

// One JSONL row. (run, seed, step, split, metric) identifies a record; ts is
// wall-clock and excluded from determinism comparisons.
struct MetricsRecord {
    std::string run;
    uint64_t seed = 0;
    int64_t step = 0;
    std::string split;   // train | val | test
    std::string metric;  // loss | accuracy | ...
    double value = 0;
    std::string ts;

    nlohmann::json to_json() const {
        return {{"run", run},   {"seed", seed},     {"step", step}, {"split", split},
                {"metric", metric}, {"value", value}, {"ts", ts}};
    }
    static MetricsRecord from_json(const nlohmann::json& j) {
        MetricsRecord r;
        r.run = j.at("run").get<std::string>();
        r.seed = j.at("seed").get<uint64_t>();
        r.step = j.at("step").get<int64_t>();
        r.split = j.at("split").get<std::string>();
        r.metric = j.at("metric").get<std::string>();
        r.value = j.at("value").get<double>();
        r.ts = j.value("ts", "");
        return r;
    }
};

using MetricSink = std::function<void(const MetricsRecord&)>;

// Streaming JSONL writer; one flush per record keeps partial results on crash.
struct JsonlWriter {
    std::ofstream out;
    explicit JsonlWriter(const std::string& path) : out(path, std::ios::trunc) {
        if (!out) throw data_error("cannot open metrics file for writing: " + path);
    }
    void write(const MetricsRecord& r) {
        out << r.to_json().dump() << "\n";
        out.flush();
    }
};

inline std::vector<MetricsRecord> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open metrics file: " + path);
    std::vector<MetricsRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(MetricsRecord::from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw data_error(path + ":" + std::to_string(lineno) + ": bad metrics record: " + e.what());
        }
    }
    return out;
}

// Canonical bytes with timestamps stripped, for determinism comparisons.
inline std::string canonical_metrics(const std::vector<MetricsRecord>& recs) {
    std::string out;
    for (const MetricsRecord& r : recs) {
        nlohmann::json j = r.to_json();
        j.erase("ts");
        out += j.dump();
        out += "\n";
    }
    return out;
}

// ------------------------------------------------------------------ summaries
struct MetricSummary {
    std::string metric;
    int n = 0;
    double mean = 0;
    std::optional<double> ci95;  // 1.96 * standard error of the mean; absent for n == 1
    std::vector<double> per_seed;
};

inline MetricSummary summarize_values(const std::string& metric, const std::vector<double>& vals) {
    MetricSummary s;
    s.metric = metric;
    s.n = int(vals.size());
    s.per_seed = vals;
    if (vals.empty()) return s;
    double sum = 0;
    for (double v : vals) sum += v;
    s.mean = sum / double(vals.size());
    if (vals.size() > 1) {
        double ss = 0;
        for (double v : vals) ss += (v - s.mean) * (v - s.mean);
        double sd = std::sqrt(ss / double(vals.size() - 1));
        s.ci95 = 1.96 * sd / std::sqrt(double(vals.size()));
    }
    return s;
}

// Final value of (split, metric) per seed across per-run files.
inline MetricSummary summarize_final(const std::vector<std::string>& jsonl_paths, const std::string& split,
                                     const std::string& metric) {
    std::vector<double> finals;
    for (const std::string& path : jsonl_paths) {
        std::optional<double> last;
        int64_t last_step = -1;
        for (const MetricsRecord& r : read_jsonl(path))
            if (r.split == split && r.metric == metric && r.step >= last_step) {
                last = r.value;
                last_step = r.step;
            }
        if (last) finals.push_back(*last);
    }
    return summarize_values(split + "/" + metric, finals);
}

// ------------------------------------------------------------------ savitzky-golay
// Least-squares polynomial smoothing coefficients for the window center,
// solved from the normal equations of the Vandermonde system.
inline std::vector<double> savgol_coeffs(int window, int polyorder) {
    if (window < 1 || window % 2 == 0) throw usage_error("savgol: window must be odd and positive");
    if (polyorder < 0 || polyorder >= window)
        throw usage_error("savgol: polyorder must satisfy 0 <= polyorder < window");
    int m = window / 2;
    int q = polyorder + 1;
    // Gram matrix G[a][b] = sum_x x^(a+b), moments vector handled per-column.
    std::vector<std::vector<double>> g(size_t(q), std::vector<double>(size_t(q), 0.0));
    for (int a = 0; a < q; ++a)
        for (int b = 0; b < q; ++b)
            for (int x = -m; x <= m; ++x) g[size_t(a)][size_t(b)] += std::pow(double(x), double(a + b));
    // Solve G c_j = v_j for each window position j where v_j[a] = x_j^a;
    // coefficient = c_j[0]. Equivalent: solve G z = e0 once, coeff_j = sum_a z[a] x_j^a.
    std::vector<std::vector<double>> aug(size_t(q), std::vector<double>(size_t(q) + 1, 0.0));
    for (int a = 0; a < q; ++a) {
        for (int b = 0; b < q; ++b) aug[size_t(a)][size_t(b)] = g[size_t(a)][size_t(b)];
        aug[size_t(a)][size_t(q)] = a == 0 ? 1.0 : 0.0;
    }
    // Gaussian elimination with partial pivoting.
    for (int col = 0; col < q; ++col) {
        int piv = col;
        for (int r = col + 1; r < q; ++r)
            if (std::fabs(aug[size_t(r)][size_t(col)]) > std::fabs(aug[size_t(piv)][size_t(col)])) piv = r;
        std::swap(aug[size_t(col)], aug[size_t(piv)]);
        double d = aug[size_t(col)][size_t(col)];
        if (std::fabs(d) < 1e-12) throw numeric_error("savgol: singular normal equations");
        for (int cc = col; cc <= q; ++cc) aug[size_t(col)][size_t(cc)] /= d;
        for (int r = 0; r < q; ++r) {
            if (r == col) continue;
            double f = aug[size_t(r)][size_t(col)];
            for (int cc = col; cc <= q; ++cc) aug[size_t(r)][size_t(cc)] -= f * aug[size_t(col)][size_t(cc)];
        }
    }
    std::vector<double> z(static_cast<size_t>(q));
    for (int a = 0; a < q; ++a) z[size_t(a)] = aug[size_t(a)][size_t(q)];
    std::vector<double> coeffs(static_cast<size_t>(window));
    for (int j = 0; j < window; ++j) {
        double x = double(j - m), acc = 0.0, xp = 1.0;
        for (int a = 0; a < q; ++a) {
            acc += z[size_t(a)] * xp;
            xp *= x;
        }
        coeffs[size_t(j)] = acc;
    }
    return coeffs;
}

// Applies the filter with symmetric window shrinking at the edges. A series
// shorter than the window truncates it to the largest valid odd size.
inline std::vector<double> savgol_smooth(const std::vector<double>& y, int window, int polyorder) {
    if (window < 1 || window % 2 == 0) throw usage_error("savgol: window must be odd and positive");
    if (polyorder >= window) throw usage_error("savgol: polyorder must be smaller than window");
    int n = int(y.size());
    if (n == 0) return {};
    if (window > n) {
        window = n % 2 == 1 ? n : n - 1;
        if (window < 1) window = 1;
    }
    int m = window / 2;
    std::vector<double> out(static_cast<size_t>(n));
    std::map<int, std::vector<double>> cache;
    for (int i = 0; i < n; ++i) {
        int h = std::min({m, i, n - 1 - i});
        int w = 2 * h + 1;
        int p = std::min(polyorder, w - 1);
        auto key = w * 1000 + p;
        auto it = cache.find(key);
        if (it == cache.end()) it = cache.emplace(key, savgol_coeffs(w, p)).first;
        const std::vector<double>& c = it->second;
        double acc = 0;
        for (int j = -h; j <= h; ++j) acc += c[size_t(j + h)] * y[size_t(i + j)];
        out[size_t(i)] = acc;
    }
    return out;
}

}  // namespace tq
