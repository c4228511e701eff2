#include <doctest.h>

#include "fedtune/rng.hpp"
#include "fedtune/tensor.hpp"

using namespace fedtune;

namespace {

ParamTree small_tree(double scale = 1.0) {
    ParamTree t;
    TensorF a = TensorF::zeros({2, 2});
    a.data = {1.0 * scale, 2.0 * scale, 3.0 * scale, 4.0 * scale};
    t.insert("b.mat", a);
    TensorF v = TensorF::zeros({3});
    v.data = {-1.0 * scale, 0.0, 1.0 * scale};
    t.insert("a.vec", v);
    return t;
}

}  // namespace

TEST_CASE("tensor invariants") {
    TensorF t = TensorF::zeros({2, 3});
    CHECK(t.size() == 6);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    t.data.pop_back();
    CHECK_THROWS_AS(t.validate(), UsageError);

    CHECK_THROWS_AS(TensorF::zeros({}), UsageError);
    CHECK_THROWS_AS(TensorF::zeros({2, 0}), UsageError);
}

TEST_CASE("param tree ordering and lookup") {
    ParamTree t = small_tree();
    CHECK(t.entries()[0].first == "a.vec");  // lexicographic regardless of insert order
    CHECK(t.entries()[1].first == "b.mat");
    CHECK(t.param_count() == 7);
    CHECK(t.has("a.vec"));
    CHECK_FALSE(t.has("missing"));
    CHECK_THROWS_AS(t.get("missing"), UsageError);
    CHECK_THROWS_AS(t.insert("a.vec", TensorF::zeros({1})), UsageError);
}

TEST_CASE("congruence and arithmetic") {
    ParamTree a = small_tree();
    ParamTree b = small_tree(2.0);
    CHECK(congruent(a, b));

    ParamTree sum = tree_axpy(a, b, 1.0);
    CHECK(sum.get("b.mat").data[0] == doctest::Approx(3.0));

    ParamTree diff = tree_sub(b, a);
    CHECK(diff.get("b.mat").data[3] == doctest::Approx(4.0));

    ParamTree scaled = tree_scale(a, -2.0);
    CHECK(scaled.get("a.vec").data[0] == doctest::Approx(2.0));

    ParamTree other;
    other.insert("different", TensorF::zeros({2}));
    CHECK_FALSE(congruent(a, other));
    CHECK_THROWS_AS(tree_axpy(a, other, 1.0), UsageError);
}

TEST_CASE("digest is order-stable and content-sensitive") {
    ParamTree a = small_tree();
    ParamTree b;
    // reversed insertion order
    b.insert("b.mat", a.get("b.mat"));
    b.insert("a.vec", a.get("a.vec"));
    CHECK(a.digest64() == b.digest64());

    b.get_mut("a.vec").data[0] += 1e-12;
    CHECK(a.digest64() != b.digest64());
}

TEST_CASE("norms") {
    ParamTree a = small_tree();
    CHECK(tree_inf_norm(a) == doctest::Approx(4.0));
    CHECK(tree_sq_norm(a) == doctest::Approx(1 + 4 + 9 + 16 + 1 + 1));
}

TEST_CASE("rng determinism and distribution sanity") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng r(7);
    double mean = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) mean += r.normal();
    mean /= n;
    CHECK(std::abs(mean) < 0.05);

    auto p = r.dirichlet(0.3, 8);
    double sum = 0.0;
    for (double v : p) {
        CHECK(v >= 0.0);
        sum += v;
    }
    CHECK(sum == doctest::Approx(1.0));
}

TEST_CASE("derive_seed separates streams") {
    CHECK(derive_seed(1, 2, 3) != derive_seed(1, 3, 2));
    CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
    CHECK(derive_seed(0, 0) != derive_seed(0, 1));
}
