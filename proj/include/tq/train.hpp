#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tq/data.hpp"
#include "tq/metrics.hpp"
#include "tq/nn.hpp"

namespace tq {

struct Hyper {
    float lr = 0.01f;
    int epochs = 100;
    int batch_size = 0;  // 0 = full batch
    uint64_t seed = 1;
    float weight_decay = 0.f;
    bool adamw = false;
};

inline AdamConfig adam_config(const Hyper& h) {
    AdamConfig c;
    c.lr = h.lr;
    c.weight_decay = h.weight_decay;
    c.decoupled = h.adamw;
    return c;
}

inline void emit(const MetricSink& sink, const std::string& run, uint64_t seed, int64_t step,
                 const std::string& split, const std::string& metric, double value) {
    if (sink) sink({run, seed, step, split, metric, value, iso8601_now()});
}

inline void check_finite(float loss, const MetricSink& sink, const std::string& run, uint64_t seed,
                         int64_t step) {
    if (!std::isfinite(loss)) {
        emit(sink, run, seed, step, "train", "diverged", 1.0);
        throw numeric_error(run + ": loss became non-finite at step " + std::to_string(step));
    }
}

inline double accuracy(const Tensor& logits, const std::vector<int>& labels) {
    std::vector<int> pred = argmax_rows(logits);
    int ok = 0;
    for (size_t i = 0; i < labels.size(); ++i) ok += pred[i] == labels[i];
    return labels.empty() ? 0.0 : double(ok) / double(labels.size());
}

// ------------------------------------------------------------------ xor
inline XorNet train_xor(const ModelSpec& spec, const XorDataset& tr, const XorDataset& te, const Hyper& hy,
                        const std::string& run, const MetricSink& sink) {
    Rng root(hy.seed);
    Rng init_rng = root.fork(1);
    Rng shuffle_rng = root.fork(2);
    XorNet net(spec, init_rng);
    Adam opt(net.params(), adam_config(hy));

    Tensor xall = tr.feature_tensor();
    std::vector<int> order(static_cast<size_t>(tr.n));
    for (int i = 0; i < tr.n; ++i) order[size_t(i)] = i;

    for (int epoch = 1; epoch <= hy.epochs; ++epoch) {
        double epoch_loss = 0;
        if (hy.batch_size <= 0) {
            Tensor logits = net.forward(xall);
            Tensor loss = softmax_cross_entropy(logits, tr.labels);
            check_finite(loss.item(), sink, run, hy.seed, epoch);
            opt.zero_grad();
            backward(loss);
            opt.step();
            epoch_loss = loss.item();
            emit(sink, run, hy.seed, epoch, "train", "accuracy", accuracy(logits, tr.labels));
        } else {
            shuffle_rng.shuffle(order);
            double seen = 0;
            for (size_t start = 0; start < order.size(); start += size_t(hy.batch_size)) {
                size_t end = std::min(order.size(), start + size_t(hy.batch_size));
                std::vector<float> bx;
                std::vector<int> by;
                for (size_t i = start; i < end; ++i) {
                    int r = order[i];
                    bx.insert(bx.end(), tr.features.begin() + r * 4, tr.features.begin() + r * 4 + 4);
                    by.push_back(tr.labels[size_t(r)]);
                }
                Tensor xb({int(end - start), 4}, std::move(bx));
                Tensor loss = softmax_cross_entropy(net.forward(xb), by);
                check_finite(loss.item(), sink, run, hy.seed, epoch);
                opt.zero_grad();
                backward(loss);
                opt.step();
                epoch_loss += double(loss.item()) * double(end - start);
                seen += double(end - start);
            }
            epoch_loss /= seen;
        }
        emit(sink, run, hy.seed, epoch, "train", "loss", epoch_loss);
    }
    Tensor test_logits = net.forward(te.feature_tensor());
    emit(sink, run, hy.seed, hy.epochs, "test", "accuracy", accuracy(test_logits, te.labels));

    L1Report rep = l1_norm_report(net);
    emit(sink, run, hy.seed, hy.epochs, "final", "xor_input_l1", rep.xor_input_l1);
    emit(sink, run, hy.seed, hy.epochs, "final", "noise_input_l1", rep.noise_input_l1);
    emit(sink, run, hy.seed, hy.epochs, "final", "output_l1", rep.output_l1);
    return net;
}

// ------------------------------------------------------------------ bag of words
inline double eval_bow(const WideMlp& net, const BowDataset& ds, const std::vector<int>& ids) {
    Rng dummy(0);
    int ok = 0;
    const int bs = 512;
    for (size_t start = 0; start < ids.size(); start += bs) {
        std::vector<int> chunk(ids.begin() + long(start),
                               ids.begin() + long(std::min(ids.size(), start + bs)));
        Tensor logits = net.forward(bow_batch(ds, chunk), dummy, false);
        std::vector<int> pred = argmax_rows(logits);
        std::vector<int> lab = bow_labels(ds, chunk);
        for (size_t i = 0; i < chunk.size(); ++i) ok += pred[i] == lab[i];
    }
    return ids.empty() ? 0.0 : double(ok) / double(ids.size());
}

inline WideMlp train_bow(const ModelSpec& spec, const BowDataset& ds, const Hyper& hy, const std::string& run,
                         const MetricSink& sink) {
    Rng root(hy.seed);
    Rng init_rng = root.fork(1);
    Rng shuffle_rng = root.fork(2);
    Rng drop_rng = root.fork(3);

    ModelDims dims{0, ds.classes(), ds.vocab_with_oov()};
    WideMlp net(spec, dims, init_rng);
    Adam opt(net.params(), adam_config(hy));

    std::vector<int> order = ds.train_idx;
    int bs = hy.batch_size > 0 ? hy.batch_size : 16;
    for (int epoch = 1; epoch <= hy.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0, seen = 0;
        for (size_t start = 0; start < order.size(); start += size_t(bs)) {
            std::vector<int> chunk(order.begin() + long(start),
                                   order.begin() + long(std::min(order.size(), start + size_t(bs))));
            Tensor logits = net.forward(bow_batch(ds, chunk), drop_rng, true);
            Tensor loss = softmax_cross_entropy(logits, bow_labels(ds, chunk));
            check_finite(loss.item(), sink, run, hy.seed, epoch);
            opt.zero_grad();
            backward(loss);
            opt.step();
            epoch_loss += double(loss.item()) * double(chunk.size());
            seen += double(chunk.size());
        }
        emit(sink, run, hy.seed, epoch, "train", "loss", epoch_loss / seen);
        emit(sink, run, hy.seed, epoch, "test", "accuracy", eval_bow(net, ds, ds.test_idx));
    }
    return net;
}

// ------------------------------------------------------------------ graphs
inline Gcn train_gcn(const ModelSpec& spec, const CitationGraph& g, const Hyper& hy, const std::string& run,
                     const MetricSink& sink) {
    Rng root(hy.seed);
    Rng init_rng = root.fork(1);
    Rng drop_rng = root.fork(3);
    ModelDims dims{g.f, g.classes, 0};
    Gcn net(spec, dims, init_rng);
    Adam opt(net.params(), adam_config(hy));

    std::vector<int> train_labels, val_labels, test_labels;
    for (int i : g.train_idx) train_labels.push_back(g.labels[size_t(i)]);
    for (int i : g.val_idx) val_labels.push_back(g.labels[size_t(i)]);
    for (int i : g.test_idx) test_labels.push_back(g.labels[size_t(i)]);

    for (int epoch = 1; epoch <= hy.epochs; ++epoch) {
        Tensor logits = net.forward(g.adj, g.features, drop_rng, true);
        Tensor loss = softmax_cross_entropy(gather_rows(logits, g.train_idx), train_labels);
        check_finite(loss.item(), sink, run, hy.seed, epoch);
        opt.zero_grad();
        backward(loss);
        opt.step();
        emit(sink, run, hy.seed, epoch, "train", "loss", loss.item());

        Rng eval_rng(0);
        Tensor eval_logits = net.forward(g.adj, g.features, eval_rng, false);
        emit(sink, run, hy.seed, epoch, "val", "accuracy",
             accuracy(gather_rows(eval_logits, g.val_idx), val_labels));
        emit(sink, run, hy.seed, epoch, "test", "accuracy",
             accuracy(gather_rows(eval_logits, g.test_idx), test_labels));
    }
    return net;
}

inline Sgc train_sgc(const ModelSpec& spec, const CitationGraph& g, const Hyper& hy, const std::string& run,
                     const MetricSink& sink, int hops = 2) {
    Rng root(hy.seed);
    Rng init_rng = root.fork(1);
    ModelDims dims{g.f, g.classes, 0};
    Sgc net(spec, dims, init_rng, hops);
    Adam opt(net.params(), adam_config(hy));

    Tensor feats({g.n, g.f}, g.features->dense(), false);
    Tensor x = sgc_precompute(g.adj, feats, hops);

    std::vector<int> train_labels, val_labels, test_labels;
    for (int i : g.train_idx) train_labels.push_back(g.labels[size_t(i)]);
    for (int i : g.val_idx) val_labels.push_back(g.labels[size_t(i)]);
    for (int i : g.test_idx) test_labels.push_back(g.labels[size_t(i)]);

    for (int epoch = 1; epoch <= hy.epochs; ++epoch) {
        Tensor logits = net.forward(x);
        Tensor loss = softmax_cross_entropy(gather_rows(logits, g.train_idx), train_labels);
        check_finite(loss.item(), sink, run, hy.seed, epoch);
        opt.zero_grad();
        backward(loss);
        opt.step();
        emit(sink, run, hy.seed, epoch, "train", "loss", loss.item());
        emit(sink, run, hy.seed, epoch, "val", "accuracy",
             accuracy(gather_rows(logits, g.val_idx), val_labels));
        emit(sink, run, hy.seed, epoch, "test", "accuracy",
             accuracy(gather_rows(logits, g.test_idx), test_labels));
    }
    return net;
}

// ------------------------------------------------------------------ sequences
// Masked-token loss over one batch of samples; only masked positions score.
inline Tensor encoder_batch_loss(const TinyEncoder& net, const SeqDataset& ds,
                                 const std::vector<int>& sample_ids, Rng& rng, bool training) {
    int batch = int(sample_ids.size());
    int len = ds.len;
    std::vector<int> tokens;
    tokens.reserve(size_t(batch) * size_t(len));
    std::vector<int> rows, labels;
    for (int b = 0; b < batch; ++b) {
        const SeqSample& s = ds.samples[size_t(sample_ids[size_t(b)])];
        tokens.insert(tokens.end(), s.masked_input.begin(), s.masked_input.end());
        for (int p : s.mask_pos) {
            rows.push_back(b * len + p);
            labels.push_back(s.tokens[size_t(p)]);
        }
    }
    Tensor h = net.encode(tokens, batch, rng, training);
    Tensor logits = net.logits(gather_rows(h, rows));
    return softmax_cross_entropy(logits, labels);
}

inline TinyEncoder train_encoder(const ModelSpec& spec, const SeqDataset& tr, const SeqDataset& val,
                                 const Hyper& hy, const std::string& run, const MetricSink& sink) {
    Rng root(hy.seed);
    Rng init_rng = root.fork(1);
    Rng shuffle_rng = root.fork(2);
    Rng drop_rng = root.fork(3);
    ModelDims dims{0, 0, tr.model_vocab()};
    TinyEncoder net(spec, dims, init_rng);
    Adam opt(net.params(), adam_config(hy));

    std::vector<int> order(tr.samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    int bs = hy.batch_size > 0 ? hy.batch_size : 16;

    for (int epoch = 1; epoch <= hy.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0, seen = 0;
        for (size_t start = 0; start < order.size(); start += size_t(bs)) {
            std::vector<int> chunk(order.begin() + long(start),
                                   order.begin() + long(std::min(order.size(), start + size_t(bs))));
            Tensor loss = encoder_batch_loss(net, tr, chunk, drop_rng, true);
            check_finite(loss.item(), sink, run, hy.seed, epoch);
            opt.zero_grad();
            backward(loss);
            opt.step();
            epoch_loss += double(loss.item()) * double(chunk.size());
            seen += double(chunk.size());
        }
        emit(sink, run, hy.seed, epoch, "train", "loss", epoch_loss / seen);

        if (!val.samples.empty()) {
            Rng eval_rng(0);
            double vloss = 0, vseen = 0;
            for (size_t start = 0; start < val.samples.size(); start += size_t(bs)) {
                std::vector<int> chunk;
                for (size_t i = start; i < std::min(val.samples.size(), start + size_t(bs)); ++i)
                    chunk.push_back(int(i));
                Tensor loss = encoder_batch_loss(net, val, chunk, eval_rng, false);
                vloss += double(loss.item()) * double(chunk.size());
                vseen += double(chunk.size());
            }
            emit(sink, run, hy.seed, epoch, "val", "loss", vloss / vseen);
        }
    }
    return net;
}

// Denoising objective for the encoder-decoder: encode the masked sequence,
// decode the original with teacher forcing, score every position.
inline Tensor encdec_batch_loss(const TinyEncDec& net, const SeqDataset& ds,
                                const std::vector<int>& sample_ids, Rng& rng, bool training) {
    int batch = int(sample_ids.size());
    int len = ds.len;
    std::vector<int> enc_tokens, dec_tokens, labels;
    for (int b = 0; b < batch; ++b) {
        const SeqSample& s = ds.samples[size_t(sample_ids[size_t(b)])];
        enc_tokens.insert(enc_tokens.end(), s.masked_input.begin(), s.masked_input.end());
        dec_tokens.push_back(ds.bos_id);
        dec_tokens.insert(dec_tokens.end(), s.tokens.begin(), s.tokens.end() - 1);
        labels.insert(labels.end(), s.tokens.begin(), s.tokens.end());
    }
    Tensor enc_h = net.encoder.encode(enc_tokens, batch, rng, training);
    Tensor h = net.decode(dec_tokens, enc_h, batch, rng, training);
    Tensor logits = net.encoder.logits(h);
    return softmax_cross_entropy(logits, labels);
}

inline TinyEncDec train_encdec(const ModelSpec& spec, const SeqDataset& tr, const SeqDataset& val,
                               const Hyper& hy, const std::string& run, const MetricSink& sink) {
    Rng root(hy.seed);
    Rng init_rng = root.fork(1);
    Rng shuffle_rng = root.fork(2);
    Rng drop_rng = root.fork(3);
    ModelDims dims{0, 0, tr.model_vocab()};
    TinyEncDec net(spec, dims, init_rng);
    Adam opt(net.params(), adam_config(hy));

    std::vector<int> order(tr.samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    int bs = hy.batch_size > 0 ? hy.batch_size : 16;

    for (int epoch = 1; epoch <= hy.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0, seen = 0;
        for (size_t start = 0; start < order.size(); start += size_t(bs)) {
            std::vector<int> chunk(order.begin() + long(start),
                                   order.begin() + long(std::min(order.size(), start + size_t(bs))));
            Tensor loss = encdec_batch_loss(net, tr, chunk, drop_rng, true);
            check_finite(loss.item(), sink, run, hy.seed, epoch);
            opt.zero_grad();
            backward(loss);
            opt.step();
            epoch_loss += double(loss.item()) * double(chunk.size());
            seen += double(chunk.size());
        }
        emit(sink, run, hy.seed, epoch, "train", "loss", epoch_loss / seen);
        if (!val.samples.empty()) {
            Rng eval_rng(0);
            std::vector<int> all;
            for (size_t i = 0; i < val.samples.size(); ++i) all.push_back(int(i));
            double vloss = 0, vseen = 0;
            for (size_t start = 0; start < all.size(); start += size_t(bs)) {
                std::vector<int> chunk(all.begin() + long(start),
                                       all.begin() + long(std::min(all.size(), start + size_t(bs))));
                Tensor loss = encdec_batch_loss(net, val, chunk, eval_rng, false);
                vloss += double(loss.item()) * double(chunk.size());
                vseen += double(chunk.size());
            }
            emit(sink, run, hy.seed, epoch, "val", "loss", vloss / vseen);
        }
    }
    return net;
}

}  // namespace tq
