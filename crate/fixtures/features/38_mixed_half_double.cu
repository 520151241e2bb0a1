#include <cuda_fp16.h>
__global__ void accumulate(const half* x, double* acc, int n) {
    int i = blockIdx.x * blockDim.x + threadIdx.x;
    if (i < n) acc[i] += (double)__half2float(x[i]);
}
