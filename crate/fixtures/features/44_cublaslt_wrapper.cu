#include <cublasLt.h>
void run(cublasLtHandle_t handle, cublasLtMatmulDesc_t desc) {
    cublasLtMatmulPreference_t pref;
    cublasLtMatmulPreferenceCreate(&pref);
}
__global__ void bias_add(float* y, const float* b, int cols) {
    y[blockIdx.x * cols + threadIdx.x] += b[threadIdx.x];
}
