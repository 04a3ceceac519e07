// Throughput benchmarks for the hot paths: tokenizer encode, the forward
// pass of the desk micro-model, and one AdamW step. Run with
// --benchmark_min_time=... as usual for google-benchmark binaries.

#include <benchmark/benchmark.h>

#include <random>
#include <string>
#include <vector>

#include "bmlm/autodiff.hpp"
#include "bmlm/optimizer.hpp"
#include "bmlm/rng.hpp"
#include "bmlm/tokenizer.hpp"
#include "bmlm/transformer.hpp"

namespace {

std::string synthetic_text(std::size_t bytes) {
    static const char* words[] = {"thrombin",   "inhibitor", "protein", "binding",
                                  "the",        "of",        "with",    "receptor",
                                  "expression", "clinical"};
    std::mt19937_64 gen(7);
    std::string text;
    while (text.size() < bytes) {
        text += words[gen() % 10];
        text += ' ';
    }
    return text;
}

bmlm::TokenizerModel make_tokenizer() {
    bmlm::TokenizerTrainConfig config;
    config.vocab_size = 512;
    config.min_frequency = 2;
    config.special_tokens = {"<|endoftext|>"};
    return bmlm::TokenizerModel::train({synthetic_text(4096)}, config);
}

void bm_tokenizer_encode(benchmark::State& state) {
    const auto tokenizer = make_tokenizer();
    const std::string text = synthetic_text(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(tokenizer.encode_ids(text));
    }
    state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * text.size()));
}
BENCHMARK(bm_tokenizer_encode)->Arg(1 << 10)->Arg(1 << 14);

void bm_forward_desk(benchmark::State& state) {
    auto model = bmlm::Model<float>::init(bmlm::ModelConfig::desk(), 11);
    const std::size_t len = static_cast<std::size_t>(state.range(0));
    std::vector<bmlm::TokenId> ids(len);
    bmlm::Rng rng(3);
    for (auto& id : ids) id = static_cast<bmlm::TokenId>(rng.uniform_below(512));
    const std::vector<std::uint8_t> mask(len, 1);
    for (auto _ : state) {
        bmlm::Tape<float> tape;
        const bmlm::GraphParams params = model.register_params(tape);
        bmlm::Var hidden = model.hidden_graph(tape, params, ids, mask, nullptr);
        bmlm::Var logits = model.lm_logits_graph(tape, params, hidden);
        benchmark::DoNotOptimize(tape.value(logits).data.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * len));
}
BENCHMARK(bm_forward_desk)->Arg(32)->Arg(128);

void bm_adamw_step(benchmark::State& state) {
    const std::size_t n = static_cast<std::size_t>(state.range(0));
    bmlm::Tensor<float> param({n});
    bmlm::Tensor<float> grad({n});
    for (std::size_t i = 0; i < n; ++i) {
        param.data[i] = 0.5f;
        grad.data[i] = 0.01f;
    }
    bmlm::AdamWConfig config;
    bmlm::AdamW<float> opt(config);
    std::vector<bmlm::ParamRef<float>> refs{{"p", &param, &grad}};
    for (auto _ : state) {
        opt.step(refs, 1e-4);
        benchmark::DoNotOptimize(param.data.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n));
}
BENCHMARK(bm_adamw_step)->Arg(1 << 12)->Arg(1 << 16);

}  // namespace

BENCHMARK_MAIN();
