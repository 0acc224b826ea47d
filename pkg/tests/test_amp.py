import numpy as np
import pytest

from mvamp import amp, denoise, model, se

RAD = model.ScalarPrior.rademacher()
GAUSS = model.ScalarPrior.gaussian_unit()
PROF1 = model.BlockPriorProfile((RAD,), (1.0,))
M1 = se.OverlapModel(PROF1)


def scalar_instance(lam, n=4000, seed=0):
    X = model.sample_signal(PROF1, n, seed=seed)
    cs = model.CouplingSet.heteroskedastic(np.array([[lam]]))
    return model.synthesize_symmetric(X, cs, seed=seed + 1, profile=PROF1)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def test_init_extremes():
    X = model.sample_signal(PROF1, 500, seed=3)
    m0 = amp.init_side_information(X, 0.0, seed=4)
    assert abs(float((X.T @ m0)[0, 0]) / 500) < 5 / np.sqrt(500)
    m1 = amp.init_side_information(X, 1.0, seed=4)
    assert np.array_equal(m1, X)
    with pytest.raises(denoise.DomainError):
        amp.init_side_information(X, 1.5, seed=0)


def test_init_overlap_statistics():
    prof = PROF1
    n, rho = 4000, 0.3
    X = model.sample_signal(prof, n, seed=5)
    m0 = amp.init_side_information(X, rho, seed=6)
    f1 = float((X.T @ m0)[0, 0]) / n
    q1 = float((m0.T @ m0)[0, 0]) / n
    assert abs(f1 - rho) < 0.02
    assert abs(q1 - rho) < 0.02
    # init noise respects the signal support pattern
    prof2 = model.BlockPriorProfile((RAD, RAD), (0.5, 0.5))
    X2 = model.sample_signal(prof2, 100, seed=7)
    m02 = amp.init_side_information(X2, 0.5, seed=8)
    assert np.all(m02[X2 == 0.0] == 0.0)


# ---------------------------------------------------------------------------
# the symmetric recursion
# ---------------------------------------------------------------------------

def test_run_is_deterministic():
    inst = scalar_instance(1.5, n=600, seed=11)
    cfg = amp.AMPConfig(max_iter=8, rho=0.2, seed=12)
    a = amp.run_symmetric(inst, cfg)
    b = amp.run_symmetric(inst, cfg)
    for qa, qb in zip(a.Q_hat, b.Q_hat):
        assert np.array_equal(qa, qb)
    for ma, mb in zip(a.mse, b.mse):
        assert np.array_equal(ma, mb)


def test_zero_signal_stays_uninformative():
    n = 4000
    inst = model.synthesize_symmetric(
        np.zeros((n, 1)), model.CouplingSet.heteroskedastic(np.array([[2.0]])),
        seed=1, profile=PROF1,
    )
    tr = amp.run_symmetric(inst, amp.AMPConfig(max_iter=10, rho=0.0, seed=2))
    for F in tr.F_hat:
        assert np.abs(F).max() <= 5 / np.sqrt(n)


def test_supercritical_matches_se_fixed_point():
    inst = scalar_instance(2.0, n=4000, seed=21)
    tr = amp.run_symmetric(inst, amp.AMPConfig(max_iter=25, rho=0.1, seed=22))
    traj = se.run_se(M1, se.OperatorT(inst.couplings), np.array([[0.1]]), max_iter=200)
    q_amp = tr.Q_hat[-1][0, 0]
    assert abs(q_amp - traj.q_star[0]) < 0.03
    # empirical overlap increases along the run
    qs = [q[0, 0] for q in tr.Q_hat]
    assert qs[-1] > qs[0]


def test_subcritical_decays_to_zero():
    inst = scalar_instance(0.5, n=4000, seed=23)
    tr = amp.run_symmetric(inst, amp.AMPConfig(max_iter=20, rho=0.1, seed=24))
    assert tr.Q_hat[-1][0, 0] < 0.05


def test_q_hat_is_psd_and_norm_bounded():
    prof = model.BlockPriorProfile((RAD, GAUSS), (0.6, 0.4))
    X = model.sample_signal(prof, 1000, seed=31)
    cs = model.CouplingSet.heteroskedastic(np.array([[1.5, 0.4], [0.4, 1.0]]))
    inst = model.synthesize_symmetric(X, cs, seed=32, profile=prof)
    tr = amp.run_symmetric(inst, amp.AMPConfig(max_iter=10, rho=0.1, seed=33))
    for q in tr.Q_hat:
        assert np.linalg.eigvalsh(q).min() >= -1e-10
    m_final = tr.M_final
    assert np.linalg.norm(tr.Q_hat[-1]) <= np.linalg.norm(m_final) ** 2 / inst.n + 1e-10


def test_fixed_reweighting_matrices():
    inst = scalar_instance(1.5, n=500, seed=45)
    bayes = amp.run_symmetric(inst, amp.AMPConfig(max_iter=6, rho=0.2, seed=46))
    fixed = amp.run_symmetric(
        inst,
        amp.AMPConfig(max_iter=6, rho=0.2, seed=46, reweighting=(np.array([[1.5]]),)),
    )
    for qa, qb in zip(bayes.Q_hat, fixed.Q_hat):
        assert np.array_equal(qa, qb)  # A = Lambda reproduces the Bayes choice
    other = amp.run_symmetric(
        inst,
        amp.AMPConfig(max_iter=6, rho=0.2, seed=46, reweighting=(np.array([[0.7]]),)),
    )
    assert not np.array_equal(other.Q_hat[-1], bayes.Q_hat[-1])
    with pytest.raises(denoise.DomainError):
        amp.run_symmetric(
            inst, amp.AMPConfig(max_iter=2, rho=0.2, seed=46, reweighting=()),
        )


def test_diagnostic_reports_lipschitz_sup():
    rep = _diagnostic_setup("divergence", seed=93, n=1000, t=4)
    assert rep.lipschitz_sup.shape == (4, 1)
    assert np.all(rep.lipschitz_sup > 0)


def test_early_stop():
    inst = scalar_instance(2.0, n=1000, seed=41)
    cfg = amp.AMPConfig(max_iter=80, rho=0.1, seed=42, early_stop=True)
    tr = amp.run_symmetric(inst, cfg)
    assert tr.stopped_early
    assert tr.iterations < 80


def test_divergence_error_reports_iteration():
    inst = scalar_instance(1.0, n=200, seed=51)

    def bad_denoiser(Y, params):
        return denoise.DenoiserEval(np.full_like(Y, np.inf), np.zeros((1, 1)))

    with pytest.raises(amp.DivergenceError) as exc:
        amp.run_symmetric(inst, amp.AMPConfig(max_iter=5, rho=0.1, seed=52), denoiser=bad_denoiser)
    assert exc.value.iteration == 1


def test_trace_csv_export(tmp_path):
    inst = scalar_instance(1.5, n=300, seed=61)
    tr = amp.run_symmetric(inst, amp.AMPConfig(max_iter=4, rho=0.1, seed=62))
    path = tmp_path / "trace.csv"
    tr.to_csv(str(path), trial=3, seed=61, version="test")
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("trial,t,F_hat_11,Q_hat_11,mse_block_1")
    assert len(lines) == len(tr.Q_hat) + 1


# ---------------------------------------------------------------------------
# asymmetric recursion via the embedding
# ---------------------------------------------------------------------------

def test_asymmetric_zero_coupling_uninformative():
    rng = model.rng_from(71)
    X1 = GAUSS.sample(rng, (400, 1))
    X2 = GAUSS.sample(rng, (200, 1))
    res = amp.run_asymmetric(
        X1, X2, [np.zeros((1, 1))], (GAUSS, GAUSS), amp.AMPConfig(max_iter=6, rho=0.0, seed=72)
    )
    assert res.mse1[0] > 0.7 and res.mse2[0] > 0.7


def test_asymmetric_matches_bipartite_se_oracle():
    # Gaussian priors both sides: alternating scalar SE for the rectangular model
    n1, n2, gam, rho = 3000, 1500, 1.6, 0.2
    alpha = n2 / n1
    prof = model.BlockPriorProfile((GAUSS, GAUSS), (n1 / (n1 + n2), n2 / (n1 + n2)))
    m = se.OverlapModel(prof)
    lam = np.array([[0.0, np.sqrt(1 + alpha) * gam], [np.sqrt(1 + alpha) * gam, 0.0]])
    op = se.OperatorT(model.CouplingSet.heteroskedastic(lam))
    traj = se.run_se(m, op, np.diag(rho * np.asarray(prof.beta)), tol=1e-14, max_iter=800)
    gu = gv = rho
    for _ in range(800):
        gu, gv = (
            alpha * gam**2 * gv / (1 + alpha * gam**2 * gv),
            gam**2 * gu / (1 + gam**2 * gu),
        )
    assert abs(traj.q_star[0] - prof.beta[0] * gu) < 1e-9
    assert abs(traj.q_star[1] - prof.beta[1] * gv) < 1e-9
    # the AMP run lands near the SE-predicted side MSEs
    rng = model.rng_from(73)
    X1 = GAUSS.sample(rng, (n1, 1))
    X2 = GAUSS.sample(rng, (n2, 1))
    res = amp.run_asymmetric(
        X1, X2, [np.array([[gam]])], (GAUSS, GAUSS), amp.AMPConfig(max_iter=30, rho=rho, seed=74)
    )
    assert abs(res.mse1[0] - (1 - gu)) < 0.05
    assert abs(res.mse2[0] - (1 - gv)) < 0.05


def test_duplicated_symmetric_equals_direct_se():
    # X1 = X2, symmetric Gamma: embedded SE on the duplicated block equals the
    # direct d=1 symmetric SE
    gam, rho = 1.8, 0.1
    prof = model.BlockPriorProfile((RAD, RAD), (0.5, 0.5))
    m = se.OverlapModel(prof)
    lam = np.array([[0.0, np.sqrt(2) * gam], [np.sqrt(2) * gam, 0.0]])
    op = se.OperatorT(model.CouplingSet.heteroskedastic(lam))
    traj = se.run_se(m, op, np.diag([rho / 2, rho / 2]), max_iter=400)
    direct = se.run_se(
        M1, se.OperatorT(model.CouplingSet.heteroskedastic(np.array([[gam]]))),
        np.array([[rho]]), max_iter=400,
    )
    assert abs(2 * traj.q_star[0] - direct.q_star[0]) < 1e-10
    assert abs(2 * traj.q_star[1] - direct.q_star[0]) < 1e-10
    # AMP traces agree within Monte Carlo tolerance on matched seeds
    n = 2000
    X = model.sample_signal(PROF1, n, seed=81)
    inst = model.synthesize_symmetric(
        X, model.CouplingSet.heteroskedastic(np.array([[gam]])), seed=82, profile=PROF1
    )
    tr_sym = amp.run_symmetric(inst, amp.AMPConfig(max_iter=15, rho=rho, seed=83))
    res = amp.run_asymmetric(
        X, X, [np.array([[gam]])], (RAD, RAD), amp.AMPConfig(max_iter=15, rho=rho, seed=84)
    )
    q_emb = np.array([q[0, 0] + q[1, 1] for q in res.trace.Q_hat])
    q_sym = np.array([q[0, 0] for q in tr_sym.Q_hat])
    assert np.abs(q_emb - q_sym).max() < 0.06


# ---------------------------------------------------------------------------
# Gaussianity diagnostic and the Onsager correction
# ---------------------------------------------------------------------------

def _diagnostic_setup(correction, seed=91, n=4000, lam=1.5, t=8):
    inst = scalar_instance(lam, n=n, seed=seed)
    cfg = amp.AMPConfig(max_iter=t, rho=0.1, seed=seed + 1, keep_iterates=True,
                        correction=correction)
    tr = amp.run_symmetric(inst, cfg)
    traj = se.run_se(M1, se.OperatorT(inst.couplings), np.array([[0.1]]), max_iter=100)
    return amp.gaussianity_diagnostic(tr, inst, traj)


def test_residual_covariance_tracks_se():
    rep = _diagnostic_setup("divergence")
    assert rep.cov_distance[4] <= 0.05  # t = 5
    assert rep.cov_distance.max() <= 0.08


def test_first_iteration_residual_variance():
    # t=1: residual variance ~ Sigma^1 = lam^2 rho
    inst = scalar_instance(1.0, n=4000, seed=95)
    cfg = amp.AMPConfig(max_iter=1, rho=0.3, seed=96, keep_iterates=True)
    tr = amp.run_symmetric(inst, cfg)
    traj = se.run_se(M1, se.OperatorT(inst.couplings), np.array([[0.3]]), max_iter=10)
    rep = amp.gaussianity_diagnostic(tr, inst, traj)
    assert abs(traj.S[0][0, 0] - 0.3) < 1e-12  # Sigma^1 = lam^2 rho with lam = 1
    assert rep.cov_distance[0] < 0.05


def test_onsager_ablation_inflates_residuals():
    on = _diagnostic_setup("divergence", seed=97)
    off = _diagnostic_setup("disabled", seed=97)
    assert on.cov_distance[4] <= 0.05
    assert off.cov_distance[4] >= 0.2
    assert off.cov_distance[4] >= 4 * on.cov_distance[4]


def test_battery_predictions_close():
    rep = _diagnostic_setup("divergence", seed=99, n=4000, t=6)
    for name, table in rep.battery.items():
        assert table[:6].max() < 0.08, name


def test_diagnostic_requires_iterates():
    inst = scalar_instance(1.0, n=300, seed=101)
    tr = amp.run_symmetric(inst, amp.AMPConfig(max_iter=3, rho=0.1, seed=102))
    traj = se.run_se(M1, se.OperatorT(inst.couplings), np.array([[0.1]]), max_iter=10)
    with pytest.raises(denoise.DomainError):
        amp.gaussianity_diagnostic(tr, inst, traj)
