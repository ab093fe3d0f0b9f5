// Cartesian genetic programming over the matrix op set: fixed-length
// acyclic graph genotypes, random generation, point mutation with a
// forced active change, active-node analysis, and decoding to programs.
#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dsl.hpp"
#include "matrix.hpp"

namespace evofilter::cgp {

enum class NodeOp { Add, Sub, Assign, MatMul, Invert, Transpose };

inline const char* node_op_name(NodeOp op) {
    switch (op) {
    case NodeOp::Add: return "add";
    case NodeOp::Sub: return "sub";
    case NodeOp::Assign: return "assign";
    case NodeOp::MatMul: return "matmul";
    case NodeOp::Invert: return "invert";
    case NodeOp::Transpose: return "transpose";
    }
    return "?";
}

inline NodeOp parse_node_op(const std::string& name) {
    if (name == "add") return NodeOp::Add;
    if (name == "sub") return NodeOp::Sub;
    if (name == "assign") return NodeOp::Assign;
    if (name == "matmul") return NodeOp::MatMul;
    if (name == "invert") return NodeOp::Invert;
    if (name == "transpose") return NodeOp::Transpose;
    throw domain_error("unknown node op: " + name);
}

inline bool is_unary(NodeOp op) {
    return op == NodeOp::Assign || op == NodeOp::Invert || op == NodeOp::Transpose;
}

struct Node {
    NodeOp op = NodeOp::Assign;
    std::size_t conn1 = 0; // addresses inputs [0, n_in) or earlier nodes
    std::size_t conn2 = 0;
};

/// Fixed-length single-row layout; connection indices only ever address
/// inputs or strictly earlier nodes, so the graph is acyclic by
/// construction.
struct Genotype {
    std::size_t num_inputs = 0;
    std::vector<Node> nodes;
    std::vector<std::size_t> output_genes; // one per output, node or input address

    std::size_t address_of_node(std::size_t j) const { return num_inputs + j; }

    bool valid() const {
        if (num_inputs == 0 || output_genes.empty())
            return false;
        for (std::size_t j = 0; j < nodes.size(); ++j) {
            if (nodes[j].conn1 >= num_inputs + j || nodes[j].conn2 >= num_inputs + j)
                return false;
        }
        for (std::size_t gene : output_genes)
            if (gene >= num_inputs + nodes.size())
                return false;
        return true;
    }
};

/// The set named by the paper plus the two ops its own discovered
/// graphs use (sub and transpose); default for every search.
inline std::vector<NodeOp> extended_node_set() {
    return {NodeOp::Add, NodeOp::Sub, NodeOp::Assign, NodeOp::MatMul, NodeOp::Invert,
            NodeOp::Transpose};
}

/// Strictly the ops listed in the paper's text.
inline std::vector<NodeOp> strict_node_set() {
    return {NodeOp::Add, NodeOp::Assign, NodeOp::MatMul, NodeOp::Invert};
}

struct CgpConfig {
    std::vector<NodeOp> node_set = extended_node_set();
    std::size_t max_nodes = 10;
    double per_gene_mutation_rate = 0.1;
};

inline Genotype random_genotype(const CgpConfig& cfg, std::size_t num_inputs,
                                std::size_t num_outputs, std::mt19937_64& rng) {
    if (cfg.node_set.empty() || cfg.max_nodes == 0)
        throw domain_error("node set and max_nodes must be non-empty");
    Genotype g;
    g.num_inputs = num_inputs;
    g.nodes.resize(cfg.max_nodes);
    std::uniform_int_distribution<std::size_t> op_pick(0, cfg.node_set.size() - 1);
    for (std::size_t j = 0; j < cfg.max_nodes; ++j) {
        std::uniform_int_distribution<std::size_t> conn(0, num_inputs + j - 1);
        g.nodes[j].op = cfg.node_set[op_pick(rng)];
        g.nodes[j].conn1 = conn(rng);
        g.nodes[j].conn2 = conn(rng);
    }
    std::uniform_int_distribution<std::size_t> out(0, num_inputs + cfg.max_nodes - 1);
    g.output_genes.resize(num_outputs);
    for (auto& gene : g.output_genes)
        gene = out(rng);
    return g;
}

/// Indices of nodes reachable backward from the output genes.
inline std::vector<bool> active_nodes(const Genotype& g) {
    std::vector<bool> active(g.nodes.size(), false);
    std::vector<std::size_t> stack;
    for (std::size_t gene : g.output_genes)
        if (gene >= g.num_inputs)
            stack.push_back(gene - g.num_inputs);
    while (!stack.empty()) {
        const std::size_t j = stack.back();
        stack.pop_back();
        if (active[j])
            continue;
        active[j] = true;
        const Node& n = g.nodes[j];
        if (n.conn1 >= g.num_inputs)
            stack.push_back(n.conn1 - g.num_inputs);
        if (!is_unary(n.op) && n.conn2 >= g.num_inputs)
            stack.push_back(n.conn2 - g.num_inputs);
    }
    return active;
}

namespace detail {

// Gene addressing: node j owns genes 3j (op), 3j+1 (conn1), 3j+2
// (conn2); output k is gene 3*nodes + k.
inline std::size_t gene_count(const Genotype& g) {
    return 3 * g.nodes.size() + g.output_genes.size();
}

inline bool gene_is_active(const Genotype& g, const std::vector<bool>& active, std::size_t gene) {
    if (gene >= 3 * g.nodes.size())
        return true; // output genes are always active
    return active[gene / 3];
}

inline std::size_t gene_domain_size(const Genotype& g, const CgpConfig& cfg, std::size_t gene) {
    if (gene >= 3 * g.nodes.size())
        return g.num_inputs + g.nodes.size();
    const std::size_t j = gene / 3;
    return gene % 3 == 0 ? cfg.node_set.size() : g.num_inputs + j;
}

inline void redraw_gene(Genotype& g, const CgpConfig& cfg, std::size_t gene,
                        std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, gene_domain_size(g, cfg, gene) - 1);
    const std::size_t v = pick(rng);
    if (gene >= 3 * g.nodes.size()) {
        g.output_genes[gene - 3 * g.nodes.size()] = v;
        return;
    }
    Node& n = g.nodes[gene / 3];
    switch (gene % 3) {
    case 0: n.op = cfg.node_set[v]; break;
    case 1: n.conn1 = v; break;
    case 2: n.conn2 = v; break;
    }
}

inline bool gene_equal(const Genotype& a, const Genotype& b, std::size_t gene) {
    if (gene >= 3 * a.nodes.size())
        return a.output_genes[gene - 3 * a.nodes.size()] ==
               b.output_genes[gene - 3 * b.nodes.size()];
    const Node& na = a.nodes[gene / 3];
    const Node& nb = b.nodes[gene / 3];
    switch (gene % 3) {
    case 0: return na.op == nb.op;
    case 1: return na.conn1 == nb.conn1;
    default: return na.conn2 == nb.conn2;
    }
}

} // namespace detail

/// Point mutation: every gene redraws with the configured probability.
/// If the pass left every gene of the parent's active subgraph intact,
/// one uniformly chosen active gene is forced to a different value, so
/// no mutation is a guaranteed no-op.
inline Genotype mutate(const Genotype& parent, const CgpConfig& cfg, std::mt19937_64& rng) {
    Genotype child = parent;
    const std::vector<bool> parent_active = active_nodes(parent);
    std::uniform_real_distribution<double> coin(0.0, 1.0);

    const std::size_t genes = detail::gene_count(parent);
    for (std::size_t gene = 0; gene < genes; ++gene)
        if (coin(rng) < cfg.per_gene_mutation_rate)
            detail::redraw_gene(child, cfg, gene, rng);

    bool active_changed = false;
    for (std::size_t gene = 0; gene < genes && !active_changed; ++gene)
        if (detail::gene_is_active(parent, parent_active, gene) &&
            !detail::gene_equal(parent, child, gene))
            active_changed = true;

    if (!active_changed) {
        std::vector<std::size_t> candidates;
        for (std::size_t gene = 0; gene < genes; ++gene)
            if (detail::gene_is_active(parent, parent_active, gene) &&
                detail::gene_domain_size(parent, cfg, gene) > 1)
                candidates.push_back(gene);
        if (!candidates.empty()) {
            std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
            const std::size_t gene = candidates[pick(rng)];
            do {
                detail::redraw_gene(child, cfg, gene, rng);
            } while (detail::gene_equal(parent, child, gene));
        }
    }
    return child;
}

/// One statement per active node in index (topological) order, then
/// alias statements for outputs that share a node or read an input.
inline dsl::Program decode(const Genotype& g, const dsl::Signature& sig) {
    if (sig.inputs.size() != g.num_inputs || sig.outputs.size() != g.output_genes.size())
        throw domain_error("signature arity does not match the genotype");
    dsl::Program p;
    p.signature = sig;

    const std::vector<bool> active = active_nodes(g);

    // Name each address: inputs by signature, nodes by the first output
    // that selects them, otherwise a synthetic local numbered in emission
    // order so identical active subgraphs print identically regardless
    // of where inactive nodes sit.
    std::vector<std::string> node_name(g.nodes.size());
    std::vector<bool> named(g.nodes.size(), false);
    for (std::size_t k = 0; k < g.output_genes.size(); ++k) {
        const std::size_t gene = g.output_genes[k];
        if (gene >= g.num_inputs && !named[gene - g.num_inputs]) {
            node_name[gene - g.num_inputs] = sig.outputs[k];
            named[gene - g.num_inputs] = true;
        }
    }
    std::size_t local_counter = 0;
    for (std::size_t j = 0; j < g.nodes.size(); ++j)
        if (!named[j] && active[j])
            node_name[j] = "n" + std::to_string(++local_counter);

    auto ref_name = [&](std::size_t address) {
        return address < g.num_inputs ? sig.inputs[address]
                                      : node_name[address - g.num_inputs];
    };
    auto make_ref = [&](std::size_t address) {
        dsl::Expr e;
        e.kind = dsl::ExprKind::Ref;
        e.name = ref_name(address);
        return std::make_shared<dsl::Expr>(std::move(e));
    };

    for (std::size_t j = 0; j < g.nodes.size(); ++j) {
        if (!active[j])
            continue;
        const Node& n = g.nodes[j];
        dsl::Expr e;
        switch (n.op) {
        case NodeOp::Add:
            e.kind = dsl::ExprKind::Add;
            e.lhs = make_ref(n.conn1);
            e.rhs = make_ref(n.conn2);
            break;
        case NodeOp::Sub:
            e.kind = dsl::ExprKind::Sub;
            e.lhs = make_ref(n.conn1);
            e.rhs = make_ref(n.conn2);
            break;
        case NodeOp::MatMul:
            e.kind = dsl::ExprKind::MatMul;
            e.lhs = make_ref(n.conn1);
            e.rhs = make_ref(n.conn2);
            break;
        case NodeOp::Assign:
            e = *make_ref(n.conn1);
            break;
        case NodeOp::Invert:
            e.kind = dsl::ExprKind::Invert;
            e.lhs = make_ref(n.conn1);
            break;
        case NodeOp::Transpose:
            e.kind = dsl::ExprKind::Transpose;
            e.lhs = make_ref(n.conn1);
            break;
        }
        dsl::Statement stmt;
        stmt.target = node_name[j];
        stmt.expr = std::make_shared<dsl::Expr>(std::move(e));
        p.statements.push_back(std::move(stmt));
    }

    for (std::size_t k = 0; k < g.output_genes.size(); ++k) {
        const std::size_t gene = g.output_genes[k];
        const std::string source = ref_name(gene);
        if (source == sig.outputs[k])
            continue; // the node statement already binds this output
        dsl::Statement alias;
        alias.target = sig.outputs[k];
        alias.expr = make_ref(gene);
        p.statements.push_back(std::move(alias));
    }
    return p;
}

// ---------------------------------------------------------------------------
// Structured-text serialization

inline std::string to_text(const Genotype& g) {
    std::ostringstream out;
    out << "cgp-genotype v1\n";
    out << "inputs " << g.num_inputs << "\n";
    out << "nodes " << g.nodes.size() << "\n";
    for (std::size_t j = 0; j < g.nodes.size(); ++j) {
        const Node& n = g.nodes[j];
        out << "node " << j << ' ' << node_op_name(n.op) << ' ' << n.conn1 << ' ' << n.conn2
            << "\n";
    }
    out << "outputs " << g.output_genes.size() << "\n";
    for (std::size_t k = 0; k < g.output_genes.size(); ++k)
        out << "output " << k << ' ' << g.output_genes[k] << "\n";
    return out.str();
}

inline Genotype genotype_from_text(const std::string& text) {
    std::istringstream in(text);
    std::string word;
    std::string version;
    in >> word >> version;
    if (word != "cgp-genotype" || version != "v1")
        throw domain_error("not a cgp-genotype v1 file");
    Genotype g;
    std::size_t node_count = 0;
    std::size_t output_count = 0;
    if (!(in >> word >> g.num_inputs) || word != "inputs")
        throw domain_error("expected 'inputs <n>'");
    if (!(in >> word >> node_count) || word != "nodes")
        throw domain_error("expected 'nodes <n>'");
    g.nodes.resize(node_count);
    for (std::size_t j = 0; j < node_count; ++j) {
        std::size_t idx = 0;
        std::string op;
        if (!(in >> word >> idx >> op >> g.nodes[j].conn1 >> g.nodes[j].conn2) ||
            word != "node" || idx != j)
            throw domain_error("malformed node line " + std::to_string(j));
        g.nodes[j].op = parse_node_op(op);
    }
    if (!(in >> word >> output_count) || word != "outputs")
        throw domain_error("expected 'outputs <n>'");
    g.output_genes.resize(output_count);
    for (std::size_t k = 0; k < output_count; ++k) {
        std::size_t idx = 0;
        if (!(in >> word >> idx >> g.output_genes[k]) || word != "output" || idx != k)
            throw domain_error("malformed output line " + std::to_string(k));
    }
    if (!g.valid())
        throw domain_error("genotype violates its structural invariants");
    return g;
}

/// Inverse of decode for programs in graph-decomposed form: every
/// statement one op over plain references.
inline Genotype genotype_from_program(const dsl::Program& p) {
    Genotype g;
    g.num_inputs = p.signature.inputs.size();
    std::map<std::string, std::size_t> address;
    for (std::size_t i = 0; i < p.signature.inputs.size(); ++i)
        address[p.signature.inputs[i]] = i;

    auto ref_address = [&](const dsl::ExprPtr& e) {
        if (!e || e->kind != dsl::ExprKind::Ref)
            throw domain_error("program is not in graph-decomposed form "
                               "(operands must be plain references)");
        auto it = address.find(e->name);
        if (it == address.end())
            throw domain_error("reference to unknown name " + e->name);
        return it->second;
    };

    for (const auto& stmt : p.statements) {
        Node n;
        switch (stmt.expr->kind) {
        case dsl::ExprKind::Ref:
            n.op = NodeOp::Assign;
            n.conn1 = ref_address(stmt.expr);
            break;
        case dsl::ExprKind::Add:
            n.op = NodeOp::Add;
            n.conn1 = ref_address(stmt.expr->lhs);
            n.conn2 = ref_address(stmt.expr->rhs);
            break;
        case dsl::ExprKind::Sub:
            n.op = NodeOp::Sub;
            n.conn1 = ref_address(stmt.expr->lhs);
            n.conn2 = ref_address(stmt.expr->rhs);
            break;
        case dsl::ExprKind::MatMul:
            n.op = NodeOp::MatMul;
            n.conn1 = ref_address(stmt.expr->lhs);
            n.conn2 = ref_address(stmt.expr->rhs);
            break;
        case dsl::ExprKind::Invert:
            n.op = NodeOp::Invert;
            n.conn1 = ref_address(stmt.expr->lhs);
            break;
        case dsl::ExprKind::Transpose:
            n.op = NodeOp::Transpose;
            n.conn1 = ref_address(stmt.expr->lhs);
            break;
        default:
            throw domain_error("program is not in graph-decomposed form "
                               "(unsupported expression)");
        }
        g.nodes.push_back(n);
        address[stmt.target] = g.num_inputs + g.nodes.size() - 1;
    }
    for (const auto& out : p.signature.outputs) {
        auto it = address.find(out);
        if (it == address.end())
            throw domain_error("output '" + out + "' is never assigned");
        g.output_genes.push_back(it->second);
    }
    return g;
}

} // namespace evofilter::cgp
