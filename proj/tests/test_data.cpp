#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <httplib.h>

#include <atomic>
#include <filesystem>
#include <thread>

#include "test_support.hpp"
#include "tq/archive.hpp"
#include "tq/data.hpp"
#include "tq/fetch.hpp"

using namespace tq;
namespace fs = std::filesystem;

static std::string temp_dir(const std::string& tag) {
    std::string d = (fs::temp_directory_path() / ("tqtest_" + tag + "_" + std::to_string(::getpid()))).string();
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

TEST_CASE("gen_xor invariants") {
    XorDataset ds = gen_xor(5000, 42);
    SUBCASE("label equals xor of the first two columns") {
        for (int i = 0; i < ds.n; ++i) {
            int a = int(ds.features[size_t(i) * 4 + 0]);
            int b = int(ds.features[size_t(i) * 4 + 1]);
            REQUIRE(ds.labels[size_t(i)] == (a ^ b));
        }
    }
    SUBCASE("class balance within the binomial bound") {
        int ones = 0;
        for (int l : ds.labels) ones += l;
        double bound = 3.0 * std::sqrt(5000.0) / 2.0;
        CHECK(std::fabs(double(ones) - 2500.0) <= bound);
    }
    SUBCASE("same seed reproduces the dataset, different seed does not") {
        XorDataset again = gen_xor(5000, 42);
        CHECK(again.features == ds.features);
        CHECK(again.labels == ds.labels);
        CHECK(gen_xor(5000, 43).features != ds.features);
    }
    SUBCASE("tsv round trip") {
        std::string dir = temp_dir("xor");
        save_xor_tsv(ds, dir + "/xor.tsv");
        XorDataset back = load_xor_tsv(dir + "/xor.tsv");
        CHECK(back.features == ds.features);
        CHECK(back.labels == ds.labels);
    }
}

TEST_CASE("bag-of-words loader") {
    std::string dir = temp_dir("bow");
    SUBCASE("two-document toy corpus") {
        write_file(dir + "/toy.corpus.tsv", "train\tzero\ta b a\ntrain\tone\tb c\n");
        BowDataset ds = load_bow(dir + "/toy.corpus.tsv");
        REQUIRE(ds.vocab == std::vector<std::string>{"a", "b", "c"});
        REQUIRE(ds.docs.size() == 2);
        auto counts_of = [&](int di) {
            std::vector<float> v(3, 0.f);
            for (auto [t, c] : ds.docs[size_t(di)].counts)
                if (t < 3) v[size_t(t)] = c;
            return v;
        };
        CHECK(counts_of(0) == std::vector<float>{2, 1, 0});
        CHECK(counts_of(1) == std::vector<float>{0, 1, 1});
    }
    SUBCASE("empty document yields a zero pooled row") {
        write_file(dir + "/empty.corpus.tsv", "train\ta\tx y\ntest\ta\t...\n");
        BowDataset ds = load_bow(dir + "/empty.corpus.tsv");
        REQUIRE(ds.test_idx.size() == 1);
        SparsePtr batch = bow_batch(ds, {ds.test_idx[0]});
        CHECK(batch->nnz() == 0);
    }
    SUBCASE("token only in the test split maps to the OOV bucket") {
        write_file(dir + "/oov.corpus.tsv", "train\ta\tfoo bar\ntest\ta\tfoo novel\n");
        BowDataset ds = load_bow(dir + "/oov.corpus.tsv");
        CHECK(ds.vocab == std::vector<std::string>{"foo", "bar"});
        const BowDataset::Doc& t = ds.docs[size_t(ds.test_idx[0])];
        bool has_oov = false;
        for (auto [tok, cnt] : t.counts) has_oov |= tok == ds.oov_index() && cnt == 1.f;
        CHECK(has_oov);
    }
    SUBCASE("malformed line reports the line number") {
        write_file(dir + "/bad.corpus.tsv", "train\ta\tok text\nnotabs\n");
        CHECK_THROWS_WITH_AS(load_bow(dir + "/bad.corpus.tsv"), doctest::Contains(":2"), Error);
    }
    SUBCASE("unknown split tag is an input error") {
        write_file(dir + "/tag.corpus.tsv", "validate\ta\ttext\n");
        CHECK_THROWS_WITH_AS(load_bow(dir + "/tag.corpus.tsv"), doctest::Contains("validate"), Error);
    }
    SUBCASE("dataset-level round trip") {
        write_file(dir + "/rt.corpus.tsv", "train\tpos\tgood good fine\ntest\tneg\tbad unseen\n");
        BowDataset ds = load_bow(dir + "/rt.corpus.tsv");
        save_bow(ds, dir + "/rt2.corpus.tsv");
        BowDataset back = load_bow(dir + "/rt2.corpus.tsv");
        REQUIRE(back.docs.size() == ds.docs.size());
        CHECK(back.vocab == ds.vocab);
        for (size_t i = 0; i < ds.docs.size(); ++i) {
            CHECK(back.docs[i].counts == ds.docs[i].counts);
            CHECK(back.docs[i].label == ds.docs[i].label);
        }
    }
}

static GraphFiles toy_graph() {
    GraphFiles g;
    g.n = 3;
    g.f = 2;
    g.classes = 2;
    g.feat_rows = {{{0, 1.f}}, {{0, 1.f}, {1, 1.f}}, {{1, 2.f}}};
    g.labels = {0, 1, 0};
    g.edges = {{0, 1}, {1, 2}};
    g.train_idx = {0};
    g.val_idx = {1};
    g.test_idx = {2};
    return g;
}

TEST_CASE("citation graph save/load") {
    std::string dir = temp_dir("graph");
    save_citation(toy_graph(), "toychain", dir + "/toychain");

    SUBCASE("round trip and hand-checked normalization") {
        CitationGraph g = load_citation(dir + "/toychain", "toychain");
        CHECK(g.n == 3);
        CHECK(g.f == 2);
        // chain 0-1-2 with self loops: deg = [2,3,2]
        auto at = [&](int i, int j) {
            for (int64_t k = g.adj->row_ptr[size_t(i)]; k < g.adj->row_ptr[size_t(i) + 1]; ++k)
                if (g.adj->col[size_t(k)] == j) return g.adj->val[size_t(k)];
            return 0.f;
        };
        CHECK(at(0, 0) == doctest::Approx(0.5f));
        CHECK(at(0, 1) == doctest::Approx(1.f / std::sqrt(6.f)));
        CHECK(at(1, 1) == doctest::Approx(1.f / 3.f));
        CHECK(at(2, 2) == doctest::Approx(0.5f));
        CHECK(at(0, 2) == 0.f);
        // features are row-normalized to sum 1
        for (int i = 0; i < g.n; ++i) {
            double s = 0;
            for (int64_t k = g.features->row_ptr[size_t(i)]; k < g.features->row_ptr[size_t(i) + 1]; ++k)
                s += g.features->val[size_t(k)];
            CHECK(s == doctest::Approx(1.0));
        }
    }
    SUBCASE("checksum mismatch is an integrity error") {
        std::string body = read_file(dir + "/toychain/nodes.tsv");
        write_file(dir + "/toychain/nodes.tsv", body + "\n");
        CHECK_THROWS_AS(load_citation(dir + "/toychain", "toychain"), Error);
        try {
            load_citation(dir + "/toychain", "toychain");
        } catch (const Error& e) {
            CHECK(e.kind == ErrKind::integrity);
        }
    }
    SUBCASE("dangling edge is a parse error") {
        GraphFiles g = toy_graph();
        g.edges.push_back({0, 9});
        // save_citation writes it; the loader rejects it
        save_citation(g, "bad", dir + "/bad");
        CHECK_THROWS_WITH_AS(load_citation(dir + "/bad", "bad"), doctest::Contains("dangling"), Error);
    }
    SUBCASE("node row order in the file does not matter") {
        CitationGraph a = load_citation(dir + "/toychain", "toychain");
        std::string nodes = read_file(dir + "/toychain/nodes.tsv");
        auto lines = split(nodes, '\n');
        std::string reordered = lines[2] + "\n" + lines[0] + "\n" + lines[1] + "\n";
        write_file(dir + "/toychain/nodes.tsv", reordered);
        nlohmann::json meta = nlohmann::json::parse(read_file(dir + "/toychain/meta.json"));
        meta["hashes"]["nodes.tsv"] = sha256_hex(reordered);
        write_file(dir + "/toychain/meta.json", meta.dump(2) + "\n");
        CitationGraph b = load_citation(dir + "/toychain", "toychain");
        CHECK(a.labels == b.labels);
        CHECK(a.features->dense() == b.features->dense());
    }
}

TEST_CASE("copytask generation") {
    SeqDataset ds = gen_seq_copytask(32, 32, 10, 0.15, 9);
    SUBCASE("mask count is the ceiling of mask_prob * len") {
        for (const SeqSample& s : ds.samples) REQUIRE(s.mask_pos.size() == 5);  // ceil(4.8)
    }
    SUBCASE("masking replaces exactly the masked positions") {
        for (const SeqSample& s : ds.samples) {
            std::set<int> masked(s.mask_pos.begin(), s.mask_pos.end());
            for (int t = 0; t < ds.len; ++t) {
                if (masked.count(t))
                    CHECK(s.masked_input[size_t(t)] == ds.mask_id);
                else
                    CHECK(s.masked_input[size_t(t)] == s.tokens[size_t(t)]);
            }
        }
    }
    SUBCASE("same seed reproduces the dataset") {
        SeqDataset again = gen_seq_copytask(32, 32, 10, 0.15, 9);
        for (size_t i = 0; i < ds.samples.size(); ++i) {
            CHECK(again.samples[i].tokens == ds.samples[i].tokens);
            CHECK(again.samples[i].mask_pos == ds.samples[i].mask_pos);
        }
    }
    SUBCASE("bad mask probability is rejected") {
        CHECK_THROWS_AS(gen_seq_copytask(4, 8, 4, 0.0, 1), Error);
        CHECK_THROWS_AS(gen_seq_copytask(4, 8, 4, 1.0, 1), Error);
    }
}

TEST_CASE("archive round trips") {
    SUBCASE("gzip") {
        std::string payload = "the quick brown fox\n";
        for (int i = 0; i < 6; ++i) payload += payload;
        CHECK(gzip_decompress(gzip_compress(payload)) == payload);
        std::string bad = gzip_compress(payload);
        bad[bad.size() / 2] = char(bad[bad.size() / 2] ^ 0x7F);
        CHECK_THROWS_AS(gzip_decompress(bad), Error);
    }
    SUBCASE("tar") {
        std::vector<TarEntry> in{{"dir/a.txt", "hello"}, {"b.bin", std::string(1000, 'x')}};
        std::vector<TarEntry> out = tar_extract(tar_create(in));
        REQUIRE(out.size() == 2);
        CHECK(out[0].name == "dir/a.txt");
        CHECK(out[0].bytes == "hello");
        CHECK(out[1].bytes == in[1].bytes);
    }
}

// Synthetic LINQS-format cora archive, large enough for the standard split.
static std::string synthetic_cora_tgz() {
    Rng rng(2024);
    int n = 1700, f = 12, classes = 7;
    std::string content, cites;
    for (int i = 0; i < n; ++i) {
        content += "paper" + std::to_string(i);
        for (int j = 0; j < f; ++j) content += rng.bernoulli(0.3) ? "\t1" : "\t0";
        content += "\tclass" + std::to_string(i % classes) + "\n";
    }
    for (int e = 0; e < 4000; ++e) {
        int a = int(rng.below(uint64_t(n))), b = int(rng.below(uint64_t(n)));
        cites += "paper" + std::to_string(a) + "\tpaper" + std::to_string(b) + "\n";
    }
    return gzip_compress(tar_create({{"cora/cora.content", content}, {"cora/cora.cites", cites}}));
}

TEST_CASE("fetch: pinning, idempotence, integrity, conversion") {
    std::string payload = synthetic_cora_tgz();
    std::string sha = sha256_hex(payload);

    httplib::Server server;
    std::atomic<int> hits{0};
    server.Get("/cora.tgz", [&](const httplib::Request&, httplib::Response& res) {
        ++hits;
        res.set_content(payload, "application/octet-stream");
    });
    int port = server.bind_to_any_port("127.0.0.1");
    std::thread server_thread([&] { server.listen_after_bind(); });
    while (!server.is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(5));
    std::string url = "http://127.0.0.1:" + std::to_string(port) + "/cora.tgz";

    std::string dir = temp_dir("fetch");

    SUBCASE("fetch, verify, convert, then no-op on the second call") {
        FetchResult r1 = fetch_dataset("cora", dir, url, sha);
        CHECK_FALSE(r1.already_present);
        CHECK(r1.source_hashes == std::vector<std::string>{sha});
        CitationGraph g = load_citation(dir + "/cora", "cora");
        CHECK(g.n == 1700);
        CHECK(g.train_idx.size() == 140);
        CHECK(g.val_idx.size() == 500);
        CHECK(g.test_idx.size() == 1000);
        std::map<int, int> per_class;
        for (int i : g.train_idx) per_class[g.labels[size_t(i)]]++;
        for (auto [cls, cnt] : per_class) CHECK(cnt == 20);

        int hits_before = hits.load();
        FetchResult r2 = fetch_dataset("cora", dir, url, sha);
        CHECK(r2.already_present);
        CHECK(hits.load() == hits_before);  // no network traffic
    }
    SUBCASE("hash mismatch removes partial state") {
        std::string wrong(64, 'a');
        CHECK_THROWS_AS(fetch_dataset("cora", dir, url, wrong), Error);
        CHECK_FALSE(fs::exists(dir + "/cora/meta.json"));
        CHECK_FALSE(fs::exists(dir + "/raw/cora/cora.tgz"));
    }
    SUBCASE("unreachable server is a retryable data error") {
        try {
            fetch_dataset("cora", dir, "http://127.0.0.1:1/cora.tgz", sha);
            CHECK(false);
        } catch (const Error& e) {
            CHECK(e.kind == ErrKind::data);
            CHECK(std::string(e.what()).find("retry") != std::string::npos);
        }
    }
    SUBCASE("corrupt archive leaves no converted output") {
        std::string garbage = "not a gzip";
        std::string gsha = sha256_hex(garbage);
        httplib::Server s2;
        s2.Get("/bad.tgz", [&](const httplib::Request&, httplib::Response& res) {
            res.set_content(garbage, "application/octet-stream");
        });
        int p2 = s2.bind_to_any_port("127.0.0.1");
        std::thread t2([&] { s2.listen_after_bind(); });
        while (!s2.is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(5));
        CHECK_THROWS_AS(
            fetch_dataset("cora", dir, "http://127.0.0.1:" + std::to_string(p2) + "/bad.tgz", gsha), Error);
        CHECK_FALSE(fs::exists(dir + "/cora/meta.json"));
        s2.stop();
        t2.join();
    }

    server.stop();
    server_thread.join();
}

TEST_CASE("text corpus converter") {
    std::string meta = "doc0\ttrain\tpos\ndoc1\ttrain\tneg\ndoc2\ttest\tpos\n";
    std::string texts = "fine movie\nawful film\ngreat fun\n";
    std::string dir = temp_dir("textconv");
    convert_text_corpus({meta, texts}, "mr", dir + "/mr");
    BowDataset ds = load_bow(dir + "/mr/mr.corpus.tsv");
    CHECK(ds.train_idx.size() == 2);
    CHECK(ds.test_idx.size() == 1);
    CHECK(ds.classes() == 2);
    CHECK(ds.vocab.size() == 4);  // fine movie awful film
}

TEST_CASE("pubmed tab converter on a synthetic fixture") {
    Rng rng(11);
    int n = 1600;
    std::string nodes = "header\n0\tcat=label:label\tw-alpha\tw-beta\tw-gamma\tsummary\n";
    for (int i = 0; i < n; ++i) {
        nodes += "pmid" + std::to_string(i) + "\tlabel=" + std::to_string(1 + i % 3);
        if (rng.bernoulli(0.8)) nodes += "\tw-alpha=" + std::to_string(0.1 + 0.001 * double(i % 17));
        if (rng.bernoulli(0.5)) nodes += "\tw-beta=0.25";
        nodes += "\tsummary=pmid" + std::to_string(i) + "\n";
    }
    std::string cites = "header\nedges\n";
    for (int e = 0; e < 3000; ++e) {
        int a = int(rng.below(uint64_t(n))), b = int(rng.below(uint64_t(n)));
        cites += std::to_string(e) + "\tpaper:pmid" + std::to_string(a) + "\t|\tpaper:pmid" +
                 std::to_string(b) + "\n";
    }
    std::string tgz = gzip_compress(tar_create({{"Pubmed-Diabetes/data/Pubmed-Diabetes.NODE.paper.tab", nodes},
                                                {"Pubmed-Diabetes/data/Pubmed-Diabetes.DIRECTED.cites.tab", cites}}));
    std::string dir = temp_dir("pubmed");
    convert_pubmed_tabs({tgz}, dir + "/pubmed", "synthetic");
    CitationGraph g = load_citation(dir + "/pubmed", "pubmed");
    CHECK(g.n == 1600);
    CHECK(g.classes == 3);
    CHECK(g.train_idx.size() == 60);
    CHECK(g.val_idx.size() == 500);
    CHECK(g.test_idx.size() == 1000);
}
