#include <catch2/catch_amalgamated.hpp>

#include <evofilter/dsl.hpp>

#include <fstream>
#include <sstream>
#include <string>

using namespace evofilter;
using namespace evofilter::dsl;

namespace {

std::string read_fixture(const std::string& name) {
    std::ifstream in(std::string(EVOFILTER_FIXTURE_DIR) + "/" + name);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Signature full_task_signature() {
    Signature sig;
    sig.inputs = {"x", "F", "P", "Q", "z", "R"};
    sig.outputs = {"x_predict", "P", "y", "S", "K", "x_update"};
    return sig;
}

} // namespace

TEST_CASE("parse the identity program") {
    Program p = parse("fn f(i_1) -> (o_1) { o_1 = i_1 }");
    REQUIRE(p.statements.size() == 1);
    CHECK(p.statements[0].target == "o_1");
    CHECK(p.statements[0].expr->kind == ExprKind::Ref);
    CHECK(p.signature.anti_leak);
}

TEST_CASE("parse the full Kalman fixture") {
    Program p = parse(read_fixture("kalman_full.mdsl"));
    CHECK(p.statements.size() == 8);
    CHECK(p.signature.inputs == std::vector<std::string>{"x", "F", "P", "Q", "z", "R"});
    CHECK_FALSE(p.signature.anti_leak);
}

TEST_CASE("parse errors carry positions") {
    CHECK_THROWS_MATCHES(parse("fn f(i_1) -> (o_1) { o_1 = undefined_var }"), parse_error,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("undefined_var")));
    try {
        parse("fn f(i_1) -> (o_1) {\n  o_1 = i_1 +\n}");
        FAIL("expected parse_error");
    } catch (const parse_error& e) {
        CHECK(e.line == 3);
    }
    CHECK_THROWS_MATCHES(parse("fn f(a) -> (o) { o = frobnicate(a) }"), parse_error,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("unknown function")));
    CHECK_THROWS_MATCHES(parse("fn f(a) -> (o) { o = inv(a, a) }"), parse_error,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("1 argument")));
    CHECK_THROWS_AS(parse("fn f(a) -> (o) { inv = a }"), parse_error);
    CHECK_THROWS_AS(parse("fn f(a) -> (o) { o = a @ 2 }"), parse_error);
    CHECK_THROWS_AS(parse("fn f(a) -> (o) { o = 2 - a }"), parse_error);
    CHECK_THROWS_AS(parse("fn f(a, a) -> (o) { o = a }"), parse_error);
    CHECK_THROWS_AS(parse("fn f(a) -> () { }"), parse_error);
    CHECK_THROWS_AS(parse("fn f(a) -> (o) { o = eye(0) }"), parse_error);
    CHECK_THROWS_AS(parse("fn f(a) -> (o) { o = eye(2.5) }"), parse_error);
}

TEST_CASE("statements accept optional semicolons and comments") {
    Program p = parse("fn f(a) -> (o) {\n  # compute\n  b = a; o = b\n}");
    CHECK(p.statements.size() == 2);
}

TEST_CASE("canonical print of the identity program") {
    Program p = parse("fn whatever ( i_1 )->( o_1 ){o_1=i_1;}");
    CHECK(print(p) == "fn f(i_1) -> (o_1) {\n  o_1 = i_1\n}\n");
}

TEST_CASE("round trip is structural identity") {
    for (const char* name : {"kalman_full.mdsl", "kalman_predict.mdsl",
                             "llm_half_gaussian.mdsl", "llm_delayed.mdsl",
                             "llm_nonlinear.mdsl"}) {
        Program p = parse(read_fixture(name));
        Program q = parse(print(p));
        INFO(name);
        CHECK(p == q);
        CHECK(print(p) == print(q));
        CHECK(program_hash(p) == program_hash(q));
    }
}

TEST_CASE("structurally equal programs print identically") {
    Program a = parse("fn alpha(x, y) -> (o) { o = x @ y + x }");
    Program b = parse("fn beta (x,y)->(o){\n\n o =  x@y+x ;}");
    CHECK(a == b);
    CHECK(print(a) == print(b));
}

TEST_CASE("grammar corners round trip") {
    const char* src =
        "fn f(a, b) -> (o_1, o_2) {\n"
        "  c = -2 * a + (b - a) @ tr(b)\n"
        "  d = maxs(c, 1e-8) + rowmin(b)\n"
        "  e = inv(b @ b + eye(2)) @ sin(c)\n"
        "  w = a @ mean(square(a)) - norm(b) @ a\n"
        "  s = 0.5 - 2\n"
        "  o_1 = 0.85 * (c + d) - e\n"
        "  o_2 = s @ tr(w) + 3 * eye(1)\n"
        "}\n";
    Program p = parse(src);
    Program q = parse(print(p));
    CHECK(p == q);
    CHECK(print(p) == print(q));
}

TEST_CASE("validate accepts the Kalman fixture against the full task") {
    Program p = parse(read_fixture("kalman_full.mdsl"));
    CHECK(validate(p, full_task_signature()).empty());
}

TEST_CASE("validate reports unassigned outputs and size budget") {
    Program p = parse("fn f(i_1) -> (o_1, o_2) { o_1 = i_1 }");
    Signature sig;
    sig.inputs = {"i_1"};
    sig.outputs = {"o_1", "o_2"};
    auto violations = validate(p, sig);
    REQUIRE(violations.size() == 1);
    CHECK(violations[0].code == "unassigned-output");

    std::string big = "fn f(i_1) -> (o_1) {\n";
    for (int i = 0; i < 64; ++i)
        big += "  t" + std::to_string(i) + " = i_1\n";
    big += "  o_1 = i_1\n}\n";
    Program q = parse(big);
    CHECK(q.statements.size() == 65);
    bool budget = false;
    for (const auto& v : validate(q, Signature{{"i_1"}, {"o_1"}, false}))
        budget |= v.code == "size-budget";
    CHECK(budget);
}

TEST_CASE("validate flags signature mismatches") {
    Program p = parse("fn f(a) -> (o) { o = a }");
    Signature sig = Signature::generic(1, 1);
    auto violations = validate(p, sig);
    int signature_mismatches = 0;
    for (const auto& v : violations)
        signature_mismatches += v.code == "signature";
    CHECK(signature_mismatches == 2);
}

TEST_CASE("interpret the identity program") {
    Program p = parse("fn f(i_1) -> (o_1) { o_1 = i_1 }");
    Env env{{"i_1", Matrix{{7}}}};
    Env out = interpret(p, env);
    CHECK(out.at("o_1") == Matrix{{7}});
}

TEST_CASE("interpret one Kalman step against hand arithmetic") {
    Program p = parse(read_fixture("kalman_full.mdsl"));
    Env env;
    env["F"] = Matrix{{1, 1}, {0, 1}};
    env["x"] = Matrix::column({1, 2});
    env["P"] = Matrix::identity(2);
    env["Q"] = Matrix::identity(2);
    env["z"] = Matrix::column({2, 4});
    env["R"] = Matrix::identity(2);
    Env out = interpret(p, env);

    CHECK(out.at("x_predict") == Matrix::column({3, 2}));
    CHECK(max_abs_diff(out.at("S"), Matrix{{4, 1}, {1, 3}}) < 1e-12);
    // multiply-back: K S must reproduce the predicted covariance
    Matrix p_pred{{3, 1}, {1, 2}};
    CHECK(max_abs_diff(matmul(out.at("K"), out.at("S")), p_pred) < 1e-10);
}

TEST_CASE("singular inversion surfaces as EvalError with the statement index") {
    Program p = parse("fn f(i_1) -> (o_1) { a = i_1 - i_1; o_1 = inv(a) }");
    Env env{{"i_1", Matrix::identity(2)}};
    try {
        interpret(p, env);
        FAIL("expected EvalError");
    } catch (const EvalError& e) {
        CHECK(e.kind == EvalErrorKind::Singular);
        CHECK(e.statement_index == 1);
    }
}

TEST_CASE("shape mismatches surface as EvalError") {
    Program p = parse("fn f(a, b) -> (o) { o = a @ b }");
    Env env{{"a", Matrix(2, 2)}, {"b", Matrix(3, 1)}};
    try {
        interpret(p, env);
        FAIL("expected EvalError");
    } catch (const EvalError& e) {
        CHECK(e.kind == EvalErrorKind::ShapeMismatch);
        CHECK(e.statement_index == 0);
    }
}

TEST_CASE("statement budget guards interpretation") {
    std::string big = "fn f(i_1) -> (o_1) {\n";
    for (int i = 0; i < 70; ++i)
        big += "  t" + std::to_string(i) + " = i_1\n";
    big += "  o_1 = i_1\n}\n";
    Program p = parse(big);
    Env env{{"i_1", Matrix{{1}}}};
    try {
        interpret(p, env);
        FAIL("expected EvalError");
    } catch (const EvalError& e) {
        CHECK(e.kind == EvalErrorKind::StepLimit);
    }
}

TEST_CASE("missing inputs are reported") {
    Program p = parse("fn f(a, b) -> (o) { o = a + b }");
    Env env{{"a", Matrix(2, 2)}};
    CHECK_THROWS_AS(interpret(p, env), EvalError);
}

TEST_CASE("scalar statement right sides bind 1x1 matrices") {
    Program p = parse("fn f(a) -> (o) { o = 0.5 - 2 }");
    Env out = interpret(p, Env{{"a", Matrix(2, 2)}});
    CHECK(out.at("o") == Matrix{{-1.5}});
}

TEST_CASE("interpretation is deterministic") {
    Program p = parse(read_fixture("llm_half_gaussian.mdsl"));
    Env env;
    env["F"] = Matrix{{1, 1}, {0, 1}};
    env["x"] = Matrix::column({0.3, -0.7});
    env["P"] = Matrix{{1.5, 0.2}, {0.2, 0.9}};
    env["Q"] = Matrix{{0.0625, 0.125}, {0.125, 0.25}};
    env["z"] = Matrix::column({1.1, 0.4});
    env["R"] = Matrix::identity(2);
    Env a = interpret(p, env);
    Env b = interpret(p, env);
    for (const auto& [name, value] : a)
        CHECK(value == b.at(name));
}

TEST_CASE("number formatting survives the round trip") {
    Program p = parse("fn f(a) -> (o) { o = maxs(1e-8 * a, 0.03) + a - 18.420680743952367 }");
    Program q = parse(print(p));
    CHECK(p == q);
    CHECK(print(p) == print(q));
}
