// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include "avf/graph.hpp"
#include "avf/tensor.hpp"

using namespace avf;

TEST_CASE("tensor shape and storage invariants") {
    Tensor t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK(t.rank() == 2);
    CHECK(t.at(4) == 5.0);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1.0}), std::invalid_argument);

    Tensor s = Tensor::scalar(7.5);
    CHECK(s.rank() == 0);
    CHECK(s.item() == 7.5);
    CHECK_THROWS_AS(t.item(), std::invalid_argument);
}

TEST_CASE("copy-on-write keeps copies independent") {
    Tensor a({3}, std::vector<double>{1, 2, 3});
    Tensor b = a;
    b.mutable_data()[0] = 99.0;
    CHECK(a.at(0) == 1.0);
    CHECK(b.at(0) == 99.0);
}

TEST_CASE("broadcast shape rules") {
    CHECK(broadcast_shapes("t", {2, 1, 4}, {3, 4}) == Tensor::Shape{2, 3, 4});
    CHECK(broadcast_shapes("t", {}, {5}) == Tensor::Shape{5});
    CHECK_THROWS_WITH_AS(broadcast_shapes("myop", {2, 3}, {4, 3}),
                         doctest::Contains("myop"), std::invalid_argument);
}

TEST_CASE("reduce_to_shape inverts broadcasting") {
    Tensor t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
    Tensor r = reduce_to_shape(t, {3});
    CHECK(r.at(0) == 5.0);
    CHECK(r.at(1) == 7.0);
    CHECK(r.at(2) == 9.0);
    Tensor s = reduce_to_shape(t, {});
    CHECK(s.item() == 21.0);
}

TEST_CASE("tensor helpers") {
    Tensor x({2}, std::vector<double>{1, -4});
    Tensor y({2}, std::vector<double>{10, 20});
    CHECK(t_axpy(2.0, x, y).at(1) == 12.0);
    CHECK(t_scale(x, -1.0).at(0) == -1.0);
    CHECK(bitwise_equal(x, x));
    CHECK(!bitwise_equal(x, y));
}
