import { describe, expect, it } from 'vitest';

import type { AttributeField } from '../src/api.js';
import { canonicalValue, validateForm, validateValue } from '../src/validate.js';

const interpretation: AttributeField = {
  name: 'interpretation',
  kind: 'Categorical',
  values: ['Positive', 'Negative', 'Equivocal', 'Indeterminate'],
  required: false,
};

const resultDate: AttributeField = {
  name: 'result_date', kind: 'Date', values: null, required: false,
};

describe('validateValue', () => {
  it('canonicalizes categorical input to the value-set member', () => {
    const result = validateValue(interpretation, '  positive ');
    expect(result).toEqual({ ok: true, value: 'Positive' });
  });

  it('rejects out-of-set categorical values', () => {
    const result = validateValue(interpretation, 'Maybe');
    expect(result.ok).toBe(false);
    expect(result.error).toContain('Maybe');
  });

  it('accepts calendar dates and rejects impossible ones', () => {
    expect(validateValue(resultDate, '2019-02-11')).toEqual({ ok: true, value: '2019-02-11' });
    expect(validateValue(resultDate, '2019-02-30').ok).toBe(false);
    expect(validateValue(resultDate, '02/11/2019').ok).toBe(false);
  });

  it('parses integers, decimals, and booleans', () => {
    const n: AttributeField = { name: 'n', kind: 'Integer', values: null, required: false };
    const x: AttributeField = { name: 'x', kind: 'Decimal', values: null, required: false };
    const b: AttributeField = { name: 'b', kind: 'Boolean', values: null, required: false };
    expect(validateValue(n, '42')).toEqual({ ok: true, value: 42 });
    expect(validateValue(n, '4.2').ok).toBe(false);
    expect(validateValue(x, '4.2')).toEqual({ ok: true, value: 4.2 });
    expect(validateValue(x, 'abc').ok).toBe(false);
    expect(validateValue(b, 'Yes')).toEqual({ ok: true, value: true });
    expect(validateValue(b, 'nope').ok).toBe(false);
  });

  it('treats an empty field as cleared (null)', () => {
    expect(validateValue(interpretation, '')).toEqual({ ok: true, value: null });
  });

  it('strips internal whitespace for stage values only', () => {
    expect(canonicalValue('stage_value', 'pT2 N0 M0')).toBe(canonicalValue('stage_value', 'pT2N0M0'));
    expect(canonicalValue('body_site', 'Upper  Extremity')).toBe('upper extremity');
  });
});

describe('validateForm', () => {
  it('collects values and errors per field', () => {
    const result = validateForm([interpretation, resultDate], {
      interpretation: 'negative',
      result_date: 'not-a-date',
    });
    expect(result.ok).toBe(false);
    expect(result.values.interpretation).toBe('Negative');
    expect(result.errors).toHaveLength(1);
  });
});
