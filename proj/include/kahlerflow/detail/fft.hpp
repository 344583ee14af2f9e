#pragma once

#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include <fftw3.h>

namespace kahlerflow::detail {

// Thin wrapper around FFTW complex-to-complex transforms of arbitrary rank.
// Plans are cached per dimension vector; plan creation is mutex-guarded
// (FFTW's planner is not thread safe), execution uses the new-array API.
class FftEngine {
public:
    static FftEngine& instance() {
        static FftEngine eng;
        return eng;
    }

    // in-place forward DFT (sign -1), unnormalized
    void forward(std::vector<std::complex<double>>& data, const std::vector<int>& dims) {
        execute(data, dims, FFTW_FORWARD);
    }

    // in-place inverse DFT (sign +1) scaled by 1/N
    void inverse(std::vector<std::complex<double>>& data, const std::vector<int>& dims) {
        execute(data, dims, FFTW_BACKWARD);
        const double inv = 1.0 / static_cast<double>(data.size());
        for (auto& z : data) z *= inv;
    }

private:
    FftEngine() = default;
    ~FftEngine() {
        for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
    }
    FftEngine(const FftEngine&) = delete;

    void execute(std::vector<std::complex<double>>& data, const std::vector<int>& dims, int sign) {
        fftw_plan plan = get_plan(dims, sign);
        fftw_execute_dft(plan, reinterpret_cast<fftw_complex*>(data.data()),
                         reinterpret_cast<fftw_complex*>(data.data()));
    }

    fftw_plan get_plan(const std::vector<int>& dims, int sign) {
        std::vector<int> key = dims;
        key.push_back(sign);
        std::lock_guard<std::mutex> lock(mutex_);
        auto it = plans_.find(key);
        if (it != plans_.end()) return it->second;
        std::size_t n = 1;
        for (int d : dims) n *= static_cast<std::size_t>(d);
        // FFTW_ESTIMATE keeps planning deterministic and leaves scratch data alone
        std::vector<std::complex<double>> scratch(n);
        fftw_plan plan = fftw_plan_dft(static_cast<int>(dims.size()), dims.data(),
                                       reinterpret_cast<fftw_complex*>(scratch.data()),
                                       reinterpret_cast<fftw_complex*>(scratch.data()), sign,
                                       FFTW_ESTIMATE);
        plans_.emplace(std::move(key), plan);
        return plan;
    }

    std::mutex mutex_;
    std::map<std::vector<int>, fftw_plan> plans_;
};

} // namespace kahlerflow::detail
