# What the synthetic benchmark looks like: scenes on a 3x3 grid, five
# question skills with disjoint answer spaces, and a task schedule where
# every (skill, object group) pair is one sub-task.
import numpy as np

from quadlab.benchmark import (Benchmark, BenchmarkConfig, build_schedule, generate_scene,
                               instantiate_question, render_features, RetryScene, COLORS)

bench = Benchmark(BenchmarkConfig())
print("category groups:", bench.groups)

rng = np.random.default_rng(7)
scene = generate_scene(rng, bench.groups[0], bench.config, seed=7)
for o in scene.objects:
    print(f"  cat{o.category} in cell{o.cell}, colour {COLORS[o.color]}")

# a scene becomes one feature row per region; empty regions carry a null code
feats = render_features(bench, scene, rng)
print("features", feats.shape)

# one question per skill; ambiguous draws raise RetryScene and are re-sampled
for skill in bench.config.skills:
    try:
        q, ans, refs = instantiate_question(bench, skill, scene, bench.groups[0], rng)
    except RetryScene:
        print(f"  {skill:<12} (ambiguous for this scene, would be regenerated)")
        continue
    words = " ".join(bench.vocab.decode(q))
    print(f"  {skill:<12} {words:<40} -> {bench.vocab.answer_name(ans)}")

# answer spaces never overlap, which is what makes out-of-answer-set errors countable
for skill, space in bench.vocab.answer_space.items():
    print(f"  {skill:<12} answers {space[0]}..{space[-1]}")

schedule = build_schedule(bench, fold=0)
print("held out (skill -> group):", schedule.held_out)
print("training order:", [(bench.config.skills[s], g) for s, g in schedule.tasks][:6], "...")
