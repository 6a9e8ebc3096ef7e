// Small tour of the library: a text classifier on the bundled fixture, FLOP
// counts against attention, and a pseudo-attention map on the shape task.
#include <malloc.h>

#include <iomanip>
#include <iostream>

#include "hypermixer/flops.hpp"
#include "hypermixer/synthetic.hpp"
#include "hypermixer/text.hpp"

using namespace hmx;

int main(int argc, char** argv)
{
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    const std::string data = argc > 1 ? argv[1] : HMX_DATA_DIR "/sentiment_2k.tsv";

    // 1. sentiment classifier
    const auto examples = load_tsv(data);
    const auto vocab = build_vocab(examples, 1);
    ModelConfig mc;
    mc.num_layers = 2;
    mc.d = 64;
    mc.d_prime = 128;
    mc.vocab_size = vocab.size();
    mc.token_mixing.kind = MixingKind::hypermixer_tied;
    Model<float> model(mc, 0);
    TrainConfig tc;
    tc.epochs = 10;
    const auto eval = batch_iter(examples, vocab, 256, 0, std::nullopt);
    TrainData td{[&](std::size_t, std::uint64_t s) { return batch_iter(examples, vocab, tc.batch_size, 0, s); }, eval};
    std::cout << "text: " << examples.size() << " sentences, vocabulary " << vocab.size() << ", "
              << count_params(mc) << " parameters\n";
    train<float>(model, tc, td, [](const EpochLog& e) {
        std::cout << "  epoch " << e.epoch << " loss " << std::setprecision(4) << e.train_loss << " accuracy "
                  << e.validation << '\n';
    });

    // 2. FLOPs of one token-mixing block
    std::cout << "\nflops at d=256, d'=512, 4 heads\n";
    for (u64 n : {128u, 512u, 2048u, 8192u})
        std::cout << "  N=" << std::setw(5) << n << "  hypermixer " << std::setw(14) << flops_hypermixer(n, 256, 512)
                  << "  attention " << std::setw(14) << flops_attention(n, 256, 4) << '\n';

    // 3. shape task
    SyntheticConfig sc;
    sc.num_train = 2000;
    sc.num_validation = 200;
    sc.num_test = 500;
    sc.d = 32;
    sc.d_prime = 64;
    sc.steps = 1500;
    sc.rounds = 5;
    const auto r = train_synthetic<float>(sc);
    std::cout << "\nshape task: test MSE " << std::setprecision(4) << r.test_mse << " (no-mixing floor "
              << r.task_floor << ")\n";
    const auto seq = generate_one(sc.seed, 3'000'000'000ull);
    const auto map = pseudo_attention(r.model, seq.input);
    std::vector<int> owner(map.n, -1);
    for (std::size_t k = 0; k < seq.shapes.size(); ++k)
        for (std::size_t t = 0; t < seq.shapes[k].width; ++t) owner[seq.shapes[k].start + t] = static_cast<int>(k);
    for (const auto& s : seq.shapes) {
        const std::size_t i = s.start + s.width / 2;
        std::size_t best = i == 0 ? 1 : 0;
        for (std::size_t j = 0; j < map.n; ++j)
            if (owner[j] != owner[i] && map(i, j) > map(i, best)) best = j;
        std::cout << "  " << (s.kind == ShapeKind::rectangle ? "rectangle" : "triangle ") << " at " << std::setw(2)
                  << s.start << ": outside its own shape, cell " << i << " leans most on cell " << best;
        if (owner[best] >= 0)
            std::cout << " (a " << (seq.shapes[owner[best]].kind == ShapeKind::rectangle ? "rectangle" : "triangle")
                      << ")";
        std::cout << '\n';
    }
}
