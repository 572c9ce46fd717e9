"""Why one-step decoding is fast: forward-pass counts and wall-clock.

An autoregressive decoder needs one forward pass per emitted token, so
long parses cost proportionally more.  The length-beam decoder always
uses exactly k passes regardless of output length.  This script trains
two small models of identical size (one per decoding style), benchmarks
both on long examples, and prints the bucketed latency report.

First run trains and caches the models (a couple of minutes); later runs
go straight to the benchmark.
"""

from narparse import DecodeConfig, NAR, bench_latency, default_toy_grammar, gen_toy

from _util import ar_twin, quick_model


def show(report):
    d = report.to_dict()
    print(f"  mode {d['mode']}, {d['params']:,} parameters")
    print(f"  overall median {d['overall_median_ms']:.1f} ms")
    print(f"  forward passes per example: {d['forward_counts']}")
    for b in d["buckets"]:
        print(f"    length {b['range']:>6s}  n={b['n']:<3d} "
              f"median {b['median_ms']:7.1f} ms  p90 {b['p90_ms']:7.1f} ms")


def main():
    nar = quick_model(NAR)
    ar = ar_twin(nar)

    # long outputs are where the decoding styles differ most
    pool = [ex for ex in gen_toy(default_toy_grammar(), seed=17, n=1200)
            if len(ex.target) >= 20][:40]
    print(f"benchmark set: {len(pool)} examples with >= 20 target tokens")
    print()

    print("length-beam decoder (k = 5, always 5 passes):")
    nar_report = bench_latency(nar, pool, DecodeConfig(k=5), warmup=3, reps=10)
    show(nar_report)
    print()

    print("autoregressive decoder (one pass per token):")
    ar_report = bench_latency(ar, pool, DecodeConfig(k=1), warmup=3, reps=10)
    show(ar_report)
    print()

    speedup = ar_report.overall_median_ms / nar_report.overall_median_ms
    print(f"median speedup on long outputs: {speedup:.1f}x")


if __name__ == "__main__":
    main()
