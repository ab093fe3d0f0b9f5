#include <catch2/catch_amalgamated.hpp>

#include <evofilter/cgp.hpp>
#include <evofilter/kalman.hpp>

#include <cmath>
#include <limits>
#include <optional>
#include <random>

using namespace evofilter;
using namespace evofilter::cgp;

namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            m(i, j) = dist(rng);
    return m;
}

// Independent oracle: evaluate the graph by plain recursion over
// addresses, bypassing decode and the tape executor entirely.
Matrix eval_address(const Genotype& g, const std::vector<Matrix>& inputs, std::size_t addr,
                    std::vector<std::optional<Matrix>>& memo) {
    if (addr < g.num_inputs)
        return inputs[addr];
    const std::size_t j = addr - g.num_inputs;
    if (memo[j])
        return *memo[j];
    const Node& n = g.nodes[j];
    Matrix a = eval_address(g, inputs, n.conn1, memo);
    Matrix result;
    switch (n.op) {
    case NodeOp::Assign: result = a; break;
    case NodeOp::Invert: result = invert(a); break;
    case NodeOp::Transpose: result = transpose(a); break;
    case NodeOp::Add: result = add(a, eval_address(g, inputs, n.conn2, memo)); break;
    case NodeOp::Sub: result = sub(a, eval_address(g, inputs, n.conn2, memo)); break;
    case NodeOp::MatMul: result = matmul(a, eval_address(g, inputs, n.conn2, memo)); break;
    }
    memo[j] = result;
    return result;
}

std::vector<Matrix> graph_eval(const Genotype& g, const std::vector<Matrix>& inputs) {
    std::vector<std::optional<Matrix>> memo(g.nodes.size());
    std::vector<Matrix> outputs;
    for (std::size_t gene : g.output_genes)
        outputs.push_back(eval_address(g, inputs, gene, memo));
    return outputs;
}

} // namespace

TEST_CASE("random genotypes satisfy the structural invariants") {
    CgpConfig cfg;
    cfg.max_nodes = 8;
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 10000; ++trial) {
        Genotype g = random_genotype(cfg, 4, 2, rng);
        REQUIRE(g.valid());
        REQUIRE(g.nodes.size() == cfg.max_nodes);
    }
}

TEST_CASE("random genotypes are deterministic by seed") {
    CgpConfig cfg;
    cfg.max_nodes = 6;
    std::mt19937_64 a(99), b(99);
    for (int i = 0; i < 10; ++i) {
        Genotype ga = random_genotype(cfg, 4, 2, a);
        Genotype gb = random_genotype(cfg, 4, 2, b);
        CHECK(to_text(ga) == to_text(gb));
    }
}

TEST_CASE("a single assign node decodes to a pass-through") {
    CgpConfig cfg;
    cfg.node_set = {NodeOp::Assign};
    cfg.max_nodes = 1;
    std::mt19937_64 rng(3);
    Genotype g = random_genotype(cfg, 1, 1, rng);
    dsl::Program p = decode(g, dsl::Signature::generic(1, 1));
    dsl::Env out = dsl::interpret(p, {{"i_1", Matrix{{4}}}});
    CHECK(out.at("o_1") == Matrix{{4}});
}

TEST_CASE("mutation with rate zero changes exactly one active gene") {
    CgpConfig cfg;
    cfg.max_nodes = 8;
    cfg.per_gene_mutation_rate = 0.0;
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        Genotype parent = random_genotype(cfg, 4, 2, rng);
        Genotype child = mutate(parent, cfg, rng);
        const auto active = active_nodes(parent);
        int changed = 0;
        bool changed_active = false;
        for (std::size_t gene = 0; gene < cgp::detail::gene_count(parent); ++gene) {
            if (!cgp::detail::gene_equal(parent, child, gene)) {
                ++changed;
                changed_active |= cgp::detail::gene_is_active(parent, active, gene);
            }
        }
        CHECK(changed == 1);
        CHECK(changed_active);
    }
}

TEST_CASE("mutation closure under full redraw and fuzz") {
    CgpConfig cfg;
    cfg.max_nodes = 10;
    std::mt19937_64 rng(7);
    Genotype g = random_genotype(cfg, 6, 6, rng);

    cfg.per_gene_mutation_rate = 1.0;
    for (int trial = 0; trial < 100; ++trial) {
        g = mutate(g, cfg, rng);
        REQUIRE(g.valid());
    }

    cfg.per_gene_mutation_rate = 0.1;
    for (int trial = 0; trial < 100000; ++trial) {
        g = mutate(g, cfg, rng);
        REQUIRE(g.valid());
    }
}

TEST_CASE("active node analysis") {
    Genotype g;
    g.num_inputs = 2;
    g.nodes = {{NodeOp::Add, 0, 1},       // n0 = i0 + i1
               {NodeOp::Transpose, 2, 0}, // n1 = tr(n0)
               {NodeOp::MatMul, 0, 1}};   // n2 unused
    g.output_genes = {3}; // n1

    auto active = active_nodes(g);
    CHECK(active == std::vector<bool>{true, true, false});

    g.output_genes = {1}; // an input: nothing active
    active = active_nodes(g);
    CHECK(active == std::vector<bool>{false, false, false});
}

TEST_CASE("decode emits one statement per active node") {
    Genotype g;
    g.num_inputs = 2;
    g.nodes = {{NodeOp::Add, 0, 1}};
    g.output_genes = {2};
    dsl::Program p = decode(g, dsl::Signature::generic(2, 1));
    CHECK(dsl::print(p) == "fn f(i_1, i_2) -> (o_1) {\n  o_1 = i_1 + i_2\n}\n");

    // inactive nodes contribute nothing
    Genotype h;
    h.num_inputs = 2;
    h.nodes = {{NodeOp::Add, 0, 1}, {NodeOp::MatMul, 0, 2}, {NodeOp::Sub, 1, 1}};
    h.output_genes = {3}; // only n1 (and its dependency n0) active
    dsl::Program q = decode(h, dsl::Signature::generic(2, 1));
    CHECK(q.statements.size() == 2);

    // output gene on an input becomes an alias statement
    Genotype k;
    k.num_inputs = 2;
    k.nodes = {{NodeOp::Add, 0, 1}};
    k.output_genes = {0};
    dsl::Program r = decode(k, dsl::Signature::generic(2, 1));
    CHECK(dsl::print(r) == "fn f(i_1, i_2) -> (o_1) {\n  o_1 = i_1\n}\n");
}

TEST_CASE("decode handles outputs sharing one node") {
    Genotype g;
    g.num_inputs = 2;
    g.nodes = {{NodeOp::Sub, 0, 1}};
    g.output_genes = {2, 2};
    dsl::Program p = decode(g, dsl::Signature::generic(2, 2));
    CHECK(dsl::validate(p, dsl::Signature::generic(2, 2)).empty());
    dsl::Env out = dsl::interpret(p, {{"i_1", Matrix{{5}}}, {"i_2", Matrix{{2}}}});
    CHECK(out.at("o_1") == Matrix{{3}});
    CHECK(out.at("o_2") == Matrix{{3}});
}

TEST_CASE("decode then interpret equals direct graph evaluation") {
    CgpConfig cfg;
    cfg.max_nodes = 8;
    std::mt19937_64 rng(11);
    const dsl::Signature sig = dsl::Signature::generic(4, 2);
    int compared = 0;
    while (compared < 100) {
        Genotype g = random_genotype(cfg, 4, 2, rng);
        std::vector<Matrix> inputs{random_matrix(rng, 2, 1), random_matrix(rng, 2, 2),
                                   random_matrix(rng, 2, 2), random_matrix(rng, 2, 2)};
        std::vector<Matrix> direct;
        try {
            direct = graph_eval(g, inputs);
        } catch (const std::exception&) {
            continue; // singular or shape-invalid sample; both paths agree on that
        }
        dsl::Program p = decode(g, sig);
        dsl::Env env;
        for (std::size_t i = 0; i < 4; ++i)
            env[sig.inputs[i]] = inputs[i];
        dsl::Env out = dsl::interpret(p, env);
        for (std::size_t k = 0; k < 2; ++k)
            CHECK(max_abs_diff(out.at(sig.outputs[k]), direct[k]) < 1e-12);
        ++compared;
    }
}

TEST_CASE("decode agrees with the oracle on rejecting invalid graphs") {
    CgpConfig cfg;
    cfg.max_nodes = 6;
    std::mt19937_64 rng(13);
    const dsl::Signature sig = dsl::Signature::generic(4, 2);
    for (int trial = 0; trial < 500; ++trial) {
        Genotype g = random_genotype(cfg, 4, 2, rng);
        std::vector<Matrix> inputs{random_matrix(rng, 2, 1), random_matrix(rng, 2, 2),
                                   random_matrix(rng, 2, 2), random_matrix(rng, 2, 2)};
        bool direct_ok = true;
        try {
            graph_eval(g, inputs);
        } catch (const std::exception&) {
            direct_ok = false;
        }
        bool decoded_ok = true;
        try {
            dsl::Env env;
            for (std::size_t i = 0; i < 4; ++i)
                env[sig.inputs[i]] = inputs[i];
            dsl::interpret(decode(g, sig), env);
        } catch (const dsl::EvalError&) {
            decoded_ok = false;
        }
        CHECK(direct_ok == decoded_ok);
    }
}

TEST_CASE("mutating only inactive genes leaves the decode unchanged") {
    Genotype g;
    g.num_inputs = 2;
    g.nodes = {{NodeOp::Add, 0, 1}, {NodeOp::MatMul, 0, 1}, {NodeOp::Sub, 2, 2}};
    g.output_genes = {4}; // n2 -> depends on n0 only; n1 inactive
    const dsl::Signature sig = dsl::Signature::generic(2, 1);
    const std::string before = dsl::print(decode(g, sig));

    Genotype h = g;
    h.nodes[1] = {NodeOp::Invert, 1, 0};
    CHECK(dsl::print(decode(h, sig)) == before);
}

TEST_CASE("serialization round trips") {
    CgpConfig cfg;
    cfg.max_nodes = 7;
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        Genotype g = random_genotype(cfg, 6, 6, rng);
        Genotype h = genotype_from_text(to_text(g));
        CHECK(to_text(g) == to_text(h));
    }
    CHECK_THROWS_AS(genotype_from_text("bogus"), domain_error);
}

TEST_CASE("genotype_from_program inverts decode") {
    CgpConfig cfg;
    cfg.max_nodes = 6;
    std::mt19937_64 rng(19);
    const dsl::Signature sig = dsl::Signature::generic(4, 2);
    for (int trial = 0; trial < 100; ++trial) {
        Genotype g = random_genotype(cfg, 4, 2, rng);
        dsl::Program p = decode(g, sig);
        Genotype h = genotype_from_program(p);
        dsl::Program q = decode(h, sig);
        CHECK(p == q);
    }
    CHECK_THROWS_AS(genotype_from_program(dsl::parse(
                        "fn f(a) -> (o) { o = a @ a + a }")),
                    domain_error);
}

TEST_CASE("iterated mutation reaches the predict semantics", "[search]") {
    // Greedy neutral-drift walk guided by squared error on two probe
    // input sets; success is semantic equality with the prediction
    // equations on 100 random inputs.
    CgpConfig cfg;
    cfg.node_set = {NodeOp::Add, NodeOp::Assign, NodeOp::MatMul, NodeOp::Invert,
                    NodeOp::Transpose};
    cfg.max_nodes = 6;
    cfg.per_gene_mutation_rate = 0.1;

    std::mt19937_64 probe_rng(2024);
    struct Probe {
        std::vector<Matrix> inputs;
        std::vector<Matrix> expected;
    };
    auto make_probe = [&](std::mt19937_64& rng) {
        Probe probe;
        probe.inputs = {random_matrix(rng, 2, 1), random_matrix(rng, 2, 2),
                        random_matrix(rng, 2, 2), random_matrix(rng, 2, 2)};
        const Matrix& x = probe.inputs[0];
        const Matrix& F = probe.inputs[1];
        const Matrix& P = probe.inputs[2];
        const Matrix& Q = probe.inputs[3];
        probe.expected = {matmul(F, x), add(matmul(matmul(F, P), transpose(F)), Q)};
        return probe;
    };
    std::vector<Probe> probes{make_probe(probe_rng), make_probe(probe_rng)};

    auto probe_error = [&](const Genotype& g) {
        double err = 0.0;
        for (const auto& probe : probes) {
            try {
                auto outs = graph_eval(g, probe.inputs);
                for (std::size_t k = 0; k < outs.size(); ++k) {
                    if (!outs[k].same_shape(probe.expected[k]))
                        return std::numeric_limits<double>::infinity();
                    const Matrix d = sub(outs[k], probe.expected[k]);
                    for (std::size_t i = 0; i < d.size(); ++i)
                        err += d.data()[i] * d.data()[i];
                }
            } catch (const std::exception&) {
                return std::numeric_limits<double>::infinity();
            }
        }
        return err;
    };

    bool any_seed_succeeded = false;
    for (std::uint64_t seed = 1; seed <= 5 && !any_seed_succeeded; ++seed) {
        std::mt19937_64 rng(seed);
        Genotype g = random_genotype(cfg, 4, 2, rng);
        double err = probe_error(g);
        for (int tries = 0; tries < 1000000 && err > 1e-20; ++tries) {
            Genotype child = mutate(g, cfg, rng);
            const double child_err = probe_error(child);
            if (child_err <= err) {
                g = child;
                err = child_err;
            }
        }
        if (err > 1e-20)
            continue;
        // confirm on 100 fresh random inputs
        std::mt19937_64 check_rng(777);
        bool all_match = true;
        for (int trial = 0; trial < 100; ++trial) {
            Probe probe = make_probe(check_rng);
            auto outs = graph_eval(g, probe.inputs);
            for (std::size_t k = 0; k < outs.size(); ++k)
                all_match &= max_abs_diff(outs[k], probe.expected[k]) < 1e-9;
        }
        any_seed_succeeded = all_match;
    }
    CHECK(any_seed_succeeded);
}
