#pragma once

// Frozen image encoder: depth patches projected by a fixed seeded Gaussian
// matrix, plus one global token (mean of the patch tokens), layer-normalised.

#include <cmath>

#include "lam3d/ops.hpp"
#include "lam3d/rng.hpp"
#include "lam3d/tensor_io.hpp"

namespace lam3d {

struct ConditionOptions {
    std::size_t patch = 8;
    std::size_t width = 128;
    std::uint64_t seed = 1234;
};

class ConditionEncoder {
public:
    ConditionEncoder() : ConditionEncoder(ConditionOptions{}) {}
    explicit ConditionEncoder(ConditionOptions opt) : opt_(opt) {
        Rng rng = Rng::derive(opt.seed, 0xc0de);
        const std::size_t in = opt.patch * opt.patch;
        projection_ = Tensor::randn({in, opt.width}, rng, 1.0f / std::sqrt(static_cast<float>(in)));
    }

    std::size_t token_count(std::size_t resolution) const {
        const std::size_t side = resolution / opt_.patch;
        return side * side + 1;
    }
    std::size_t width() const { return opt_.width; }

    // depth [D, D] -> tokens [S + 1, width]; the global token is last.
    Tensor operator()(const Tensor& depth) const {
        if (depth.rank() != 2 || depth.dim(0) != depth.dim(1)) throw ShapeError("depth image must be square [D,D]");
        const std::size_t D = depth.dim(0), P = opt_.patch;
        if (D % P != 0) throw ShapeError("depth resolution must be divisible by the patch size");
        const std::size_t side = D / P, S = side * side;
        std::vector<float> patches(S * P * P);
        const auto d = depth.data();
        for (std::size_t pr = 0; pr < side; ++pr)
            for (std::size_t pc = 0; pc < side; ++pc)
                for (std::size_t r = 0; r < P; ++r)
                    for (std::size_t c = 0; c < P; ++c)
                        patches[((pr * side + pc) * P + r) * P + c] = d[(pr * P + r) * D + pc * P + c];
        NoGradGuard ng;
        const auto tokens = matmul(Tensor({S, P * P}, std::move(patches)), projection_);
        const auto global = mean_rows(tokens);
        return layer_norm(concat({tokens, global}, 0)).detach();
    }

    const Tensor& projection() const { return projection_; }
    std::uint64_t state_hash() const { return tensor_hash(projection_); }

private:
    static Tensor mean_rows(const Tensor& x) {
        return reshape(scale(sum_axis(x, 0), 1.0f / static_cast<float>(x.dim(0))), {1, x.dim(1)});
    }

    ConditionOptions opt_;
    Tensor projection_;
};

} // namespace lam3d
