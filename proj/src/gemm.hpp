#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace dynaquant::detail {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C(m,n) (+)= op(A) * op(B) on row-major buffers. op(A) is (m,k), op(B) is (k,n).
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
    using Map = Eigen::Map<const RowMajor<T>>;
    const auto mi = static_cast<Eigen::Index>(m);
    const auto ni = static_cast<Eigen::Index>(n);
    const auto ki = static_cast<Eigen::Index>(k);
    Eigen::Map<RowMajor<T>> out(c, mi, ni);

    const auto run = [&](const auto& lhs, const auto& rhs) {
        if (accumulate)
            out.noalias() += lhs * rhs;
        else
            out.noalias() = lhs * rhs;
    };
    if (!trans_a && !trans_b)
        run(Map(a, mi, ki), Map(b, ki, ni));
    else if (trans_a && !trans_b)
        run(Map(a, ki, mi).transpose(), Map(b, ki, ni));
    else if (!trans_a && trans_b)
        run(Map(a, mi, ki), Map(b, ni, ki).transpose());
    else
        run(Map(a, ki, mi).transpose(), Map(b, ni, ki).transpose());
}

}  // namespace dynaquant::detail
