#include <cmath>
#include <cstring>

#include "doctest.h"
#include "lmt/gradcheck.hpp"
#include "lmt/quantize.hpp"
#include "test_util.hpp"

using namespace lmt;
using testutil::rand_tensor;

namespace {

// exhaustive O(K) scan oracle, independent of the quantize implementation
int64_t nearest_scan(const double *z, const double *entries, int64_t k, int64_t n_z) {
    int64_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < k; ++c) {
        double d = 0;
        for (int64_t j = 0; j < n_z; ++j) {
            const double dj = z[j] - entries[c * n_z + j];
            d += dj * dj;
        }
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

CodebookT<double> make_codebook(std::vector<double> rows, int64_t k, int64_t n_z) {
    Rng rng(1);
    CodebookT<double> cb(k, n_z, rng);
    cb.entries = Tensor64::from_data({k, n_z}, std::move(rows), true);
    return cb;
}

}  // namespace

TEST_CASE("quantize picks the nearest entry") {
    auto cb = make_codebook({0, 0, 1, 1}, 2, 2);
    auto z = Tensor64::from_data({1, 1, 1, 1, 2}, {0.2, 0.1});
    auto r = quantize(z, cb);
    CHECK(r.indices == std::vector<int64_t>{0});
    CHECK(r.grid_shape == Shape{1, 1, 1, 1});
}

TEST_CASE("quantize exact hit and tie-break") {
    auto cb = make_codebook({1, 0, -1, 0, 0, 2, 4, 4}, 4, 2);
    // exactly equal to entry 3 -> index 3
    auto z3 = Tensor64::from_data({1, 2}, {4.0, 4.0});
    CHECK(quantize(z3, cb).indices == std::vector<int64_t>{3});
    // equidistant from entries 0 and 1 -> lowest index wins
    auto zt = Tensor64::from_data({1, 2}, {0.0, 0.0});
    CHECK(quantize(zt, cb).indices == std::vector<int64_t>{0});
}

TEST_CASE("quantize agrees with the exhaustive scan on random cases") {
    Rng rng(17);
    for (int rep = 0; rep < 100; ++rep) {
        const int64_t k = 2 + rng.uniform_int(14);
        const int64_t n_z = 1 + rng.uniform_int(6);
        CodebookT<double> cb(k, n_z, rng, 1.0);
        auto z = rand_tensor<double>({3, n_z}, rng);
        auto r = quantize(z, cb, false);
        for (int64_t p = 0; p < 3; ++p) {
            CHECK(r.indices[size_t(p)] == nearest_scan(z.data().data() + p * n_z,
                                                       cb.entries.data().data(), k, n_z));
        }
        // gather identity: z_q equals entries[indices] bitwise
        for (int64_t p = 0; p < 3; ++p)
            CHECK(std::memcmp(r.z_q.data().data() + p * n_z,
                              cb.entries.data().data() + r.indices[size_t(p)] * n_z,
                              size_t(n_z) * sizeof(double)) == 0);
    }
}

TEST_CASE("quantize usage accounting") {
    Rng rng(23);
    CodebookT<double> cb(8, 3, rng);
    auto z = rand_tensor<double>({5, 3}, rng);
    quantize(z, cb);
    int64_t total = 0;
    for (auto c : cb.usage_counts) total += c;
    CHECK(total == 5);
    quantize(z, cb);
    total = 0;
    for (auto c : cb.usage_counts) total += c;
    CHECK(total == 10);
    CHECK_THROWS_AS(quantize(Tensor64::from_data({1, 2}, {0.0, 0.0}), cb), ShapeError);
}

TEST_CASE("vq_losses zero cases and beta") {
    Rng rng(29);
    CodebookT<double> cb(4, 2, rng);
    auto z = cb.entries.detach();  // encoder output exactly on the codes
    auto zq = quantize(reshape(z, {4, 2}), cb);
    auto x = rand_tensor<double>({4, 2}, rng);
    auto terms = vq_losses(x, x, zq, 0.25);
    CHECK(terms.recon.item() == 0.0);
    CHECK(terms.codebook.item() == 0.0);
    CHECK(terms.commit.item() == 0.0);

    auto z_off = rand_tensor<double>({4, 2}, rng);
    auto r2 = quantize(z_off, cb);
    auto t2 = vq_losses(x, rand_tensor<double>({4, 2}, rng), r2, 0.0);
    CHECK(t2.commit.item() == 0.0);
    CHECK(t2.codebook.item() > 0.0);
}

TEST_CASE("vq loss gradient routing") {
    Rng rng(31);
    CodebookT<double> cb(6, 3, rng);
    auto z_e = rand_tensor<double>({5, 3}, rng, 1.0, true);
    auto r = quantize(z_e, cb);
    auto x = rand_tensor<double>({5, 3}, rng);
    auto terms = vq_losses(x, x, r, 0.25);

    // commit term must not touch the entries
    terms.commit.backward();
    for (double g : cb.entries.grad()) CHECK(g == 0.0);
    bool any = false;
    for (double g : z_e.grad()) any = any || g != 0.0;
    CHECK(any);

    // codebook term must not touch the encoder output
    z_e.zero_grad();
    cb.entries.zero_grad();
    terms.codebook.backward();
    for (double g : z_e.grad()) CHECK(g == 0.0);
    any = false;
    for (double g : cb.entries.grad()) any = any || g != 0.0;
    CHECK(any);

    // finite differences with the detached branch frozen
    auto z_const = z_e.detach();
    std::vector<int64_t> idx = r.indices;
    Shape eshape = cb.entries.shape();
    std::function<Tensor64(const Tensor64 &)> f = [&](const Tensor64 &e) {
        return mse(z_const, gather_rows(e, idx));
    };
    CHECK(finite_diff_check<double>(f, cb.entries) < 1e-4);
}

TEST_CASE("straight_through forward and backward") {
    Rng rng(37);
    CodebookT<double> cb(8, 4, rng);
    auto z_e = rand_tensor<double>({6, 4}, rng, 2.0, true);  // far from any code
    auto r = quantize(z_e, cb);
    auto st = straight_through(z_e, r.z_q);
    CHECK(std::memcmp(st.data().data(), r.z_q.data().data(),
                      st.data().size() * sizeof(double)) == 0);

    // downstream quadratic loss: grad(z_e) equals the gradient z_q would receive
    auto w = rand_tensor<double>({6, 4}, rng);
    mean(mul(mul(st, st), w)).backward();
    std::vector<double> got = z_e.grad();

    auto zq_leaf = Tensor64::from_data(r.z_q.shape(), r.z_q.data(), true);
    mean(mul(mul(zq_leaf, zq_leaf), w)).backward();
    for (size_t i = 0; i < got.size(); ++i)
        CHECK(got[i] == doctest::Approx(zq_leaf.grad()[i]).epsilon(1e-14));

    bool any = false;
    for (double g : got) any = any || g != 0.0;
    CHECK(any);
}

TEST_CASE("codebook_stats hand values") {
    Rng rng(41);
    {
        CodebookT<double> cb(1024, 2, rng);
        std::fill(cb.usage_counts.begin(), cb.usage_counts.end(), 7);
        auto [ppl, dead] = codebook_stats(cb);
        CHECK(ppl == doctest::Approx(1024.0).epsilon(1e-9));
        CHECK(dead == 0.0);
    }
    {
        CodebookT<double> cb(16, 2, rng);
        cb.usage_counts[3] = 99;
        auto [ppl, dead] = codebook_stats(cb);
        CHECK(ppl == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(dead == doctest::Approx(15.0 / 16.0).epsilon(1e-12));
    }
    {
        CodebookT<double> cb(4, 2, rng);
        cb.usage_counts = {3, 1, 0, 0};
        auto [ppl, dead] = codebook_stats(cb);
        CHECK(ppl == doctest::Approx(std::exp(-(0.75 * std::log(0.75) + 0.25 * std::log(0.25))))
                         .epsilon(1e-12));
        CHECK(ppl == doctest::Approx(1.7548).epsilon(1e-4));
        CHECK(dead == 0.5);
    }
    {
        CodebookT<double> cb(4, 2, rng);
        CHECK_THROWS_AS(codebook_stats(cb), ContractError);
    }
}

TEST_CASE("perplexity stays within [1, K]") {
    Rng rng(43);
    for (int rep = 0; rep < 50; ++rep) {
        CodebookT<double> cb(8, 2, rng, 1.0);
        auto z = rand_tensor<double>({10, 2}, rng);
        quantize(z, cb);
        auto [ppl, dead] = codebook_stats(cb);
        CHECK(ppl >= 1.0);
        CHECK(ppl <= 8.0);
        CHECK(dead >= 0.0);
        CHECK(dead <= 1.0);
    }
}

TEST_CASE("revive_dead_codes") {
    Rng rng(47);
    {
        CodebookT<double> cb(4, 2, rng);
        auto z = rand_tensor<double>({3, 2}, rng);
        auto before = cb.entries.data();
        CHECK(revive_dead_codes(cb, z, 10, rng) == 0);
        CHECK(cb.entries.data() == before);
    }
    {
        CodebookT<double> cb(4, 2, rng);
        auto z = rand_tensor<double>({3, 2}, rng);
        CHECK(revive_dead_codes(cb, z, 0, rng) == 4);
    }
    {
        // two well-separated clusters; codebook initialized inside one of them
        CodebookT<double> cb(4, 2, rng, 0.01);
        std::vector<double> pts;
        Rng drng(5);
        for (int i = 0; i < 16; ++i) {
            const double cx = (i % 2 == 0) ? 0.0 : 10.0;
            pts.push_back(cx + drng.normal() * 0.05);
            pts.push_back(cx + drng.normal() * 0.05);
        }
        auto z = Tensor64::from_data({16, 2}, pts);
        quantize(z, cb);
        auto [ppl0, dead0] = codebook_stats(cb);
        CHECK(dead0 > 0.0);  // far cluster unreachable

        revive_dead_codes(cb, z, 1, rng);
        cb.reset_usage();
        quantize(z, cb);
        auto [ppl1, dead1] = codebook_stats(cb);
        CHECK(dead1 < dead0);
        CHECK(ppl1 > ppl0);
    }
}
